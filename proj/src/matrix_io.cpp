#include "rainbow/matrix_io.hpp"

#include "rainbow/errors.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <vector>

namespace rainbow {

static_assert(std::endian::native == std::endian::little,
              "flat binary matrix format assumes a little-endian host");

void save_matrix(const std::string& path, const Matrix& m) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("matrix_io: cannot write " + path);
    // Eigen stores column-major; the on-disk format is row-major.
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) row[static_cast<std::size_t>(j)] = m(i, j);
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size() * sizeof(double)));
    }
    if (!out) throw FormatError("matrix_io: short write to " + path);
}

Matrix load_matrix(const std::string& path, Eigen::Index rows, Eigen::Index cols) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("matrix_io: cannot open " + path);
    Matrix m(rows, cols);
    std::vector<double> row(static_cast<std::size_t>(cols));
    for (Eigen::Index i = 0; i < rows; ++i) {
        in.read(reinterpret_cast<char*>(row.data()),
                static_cast<std::streamsize>(row.size() * sizeof(double)));
        if (!in)
            throw FormatError("matrix_io: " + path + " truncated at row " + std::to_string(i));
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = row[static_cast<std::size_t>(j)];
    }
    return m;
}

void save_vector(const std::string& path, const Vector& v) {
    save_matrix(path, v.transpose());
}

Vector load_vector(const std::string& path, Eigen::Index n) {
    return load_matrix(path, 1, n).transpose();
}

std::string matrix_hash(const Matrix& m) {
    std::uint64_t h = 14695981039346656037ull;
    auto mix = [&](double d) {
        unsigned char bytes[sizeof(double)];
        std::memcpy(bytes, &d, sizeof(double));
        for (unsigned char b : bytes) {
            h ^= b;
            h *= 1099511628211ull;
        }
    };
    mix(static_cast<double>(m.rows()));
    mix(static_cast<double>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) mix(m(i, j));
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

} // namespace rainbow
