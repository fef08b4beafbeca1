#include "rainbow/dataset.hpp"

#include "rainbow/errors.hpp"
#include "rainbow/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>

namespace rainbow {

std::vector<Eigen::Index> Dataset::indices(Split s) const {
    std::vector<Eigen::Index> out;
    for (Eigen::Index i = 0; i < size(); ++i)
        if (split[static_cast<std::size_t>(i)] == s) out.push_back(i);
    return out;
}

Matrix Dataset::inputs_for(Split s) const {
    auto idx = indices(s);
    Matrix m(static_cast<Eigen::Index>(idx.size()), dim());
    for (std::size_t i = 0; i < idx.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = inputs.row(idx[i]);
    return m;
}

IntVector Dataset::labels_for(Split s) const {
    auto idx = indices(s);
    IntVector v(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) v(static_cast<Eigen::Index>(i)) = labels(idx[i]);
    return v;
}

void Dataset::validate() const {
    if (inputs.rows() != labels.size())
        throw DataError("dataset: inputs/labels size mismatch");
    if (static_cast<Eigen::Index>(split.size()) != inputs.rows())
        throw DataError("dataset: split tags missing");
    if (!inputs.allFinite()) throw DataError("dataset: non-finite input entry");
    for (Eigen::Index i = 0; i < labels.size(); ++i)
        if (labels(i) < 0 || labels(i) >= n_classes)
            throw DataError("dataset: label out of range at row " + std::to_string(i));
}

Dataset generate_gaussian_mixture(int d0, int n_classes, int n_per_class, double separation,
                                  std::uint64_t seed) {
    if (d0 < 1) throw ParamError("gaussian_mixture: d0 must be >= 1");
    if (n_classes < 2) throw ParamError("gaussian_mixture: n_classes must be >= 2");
    if (n_per_class < 0) throw ParamError("gaussian_mixture: n_per_class must be >= 0");
    if (separation < 0) throw ParamError("gaussian_mixture: separation must be >= 0");

    Rng mean_rng(seed, "data", "mixture-means");
    Matrix means(n_classes, d0);
    for (int c = 0; c < n_classes; ++c) {
        Vector dir = mean_rng.gaussian_vector(d0);
        double nrm = dir.norm();
        if (nrm == 0.0) dir(0) = 1.0, nrm = 1.0;
        means.row(c) = (separation / nrm) * dir.transpose();
    }

    const Eigen::Index n_total = static_cast<Eigen::Index>(2) * n_classes * n_per_class;
    Dataset ds;
    ds.inputs.resize(n_total, d0);
    ds.labels.resize(n_total);
    ds.split.resize(static_cast<std::size_t>(n_total));
    ds.n_classes = n_classes;

    Eigen::Index row = 0;
    for (Split s : {Split::Train, Split::Test}) {
        Rng rng(seed, "data", s == Split::Train ? "mixture-train" : "mixture-test");
        for (int c = 0; c < n_classes; ++c) {
            for (int i = 0; i < n_per_class; ++i) {
                ds.inputs.row(row) = means.row(c) + rng.gaussian_vector(d0).transpose();
                ds.labels(row) = c;
                ds.split[static_cast<std::size_t>(row)] = s;
                ++row;
            }
        }
    }

    ds.meta.set("name", "gaussian_mixture");
    ds.meta.set_int("seed", static_cast<std::int64_t>(seed));
    ds.meta.set_int("d0", d0);
    ds.meta.set_int("n_classes", n_classes);
    ds.meta.set_int("n_per_class", n_per_class);
    ds.meta.set_double("separation", separation);
    return ds;
}

Dataset generate_teacher_targets(int d0, int width, int depth, int n_samples,
                                 std::uint64_t seed) {
    if (d0 < 1) throw ParamError("teacher_targets: d0 must be >= 1");
    if (width < 1) throw ParamError("teacher_targets: width must be >= 1");
    if (depth < 1) throw ParamError("teacher_targets: depth must be >= 1");
    if (n_samples < 0) throw ParamError("teacher_targets: n_samples must be >= 0");

    // Frozen teacher: depth ReLU layers of the given width plus a linear
    // readout, all entries N(0,1), rho dividing by sqrt(width).
    Rng wrng(seed, "data", "teacher-weights");
    std::vector<Matrix> teacher;
    int in_dim = d0;
    for (int j = 0; j < depth; ++j) {
        teacher.push_back(wrng.gaussian_matrix(width, in_dim));
        in_dim = width;
    }
    Vector theta = wrng.gaussian_vector(width);

    Dataset ds;
    ds.inputs.resize(n_samples, d0);
    ds.labels.resize(n_samples);
    ds.split.resize(static_cast<std::size_t>(n_samples));
    ds.n_classes = 2;

    Rng xrng(seed, "data", "teacher-inputs");
    const double inv_sqrt_w = 1.0 / std::sqrt(static_cast<double>(width));
    for (int i = 0; i < n_samples; ++i) {
        Vector x = xrng.gaussian_vector(d0);
        ds.inputs.row(i) = x.transpose();
        Vector h = x;
        for (const Matrix& w : teacher) h = (w * h).cwiseMax(0.0) * inv_sqrt_w;
        double f = theta.dot(h);
        ds.labels(i) = f > 0.0 ? 1 : 0;
        ds.split[static_cast<std::size_t>(i)] = i < n_samples / 2 ? Split::Train : Split::Test;
    }

    ds.meta.set("name", "teacher_targets");
    ds.meta.set_int("seed", static_cast<std::int64_t>(seed));
    ds.meta.set_int("d0", d0);
    ds.meta.set_int("width", width);
    ds.meta.set_int("depth", depth);
    ds.meta.set_int("n_samples", n_samples);
    return ds;
}

namespace {

void assign_splits(Dataset& ds, const IngestOptions& options) {
    const Eigen::Index n = ds.size();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    if (options.seed != 0) {
        Rng rng(options.seed, "data", "ingest-split");
        rng.shuffle(order);
    }
    const Eigen::Index n_test =
        static_cast<Eigen::Index>(std::llround(options.test_fraction * static_cast<double>(n)));
    ds.split.assign(static_cast<std::size_t>(n), Split::Train);
    for (Eigen::Index i = n - n_test; i < n; ++i)
        ds.split[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = Split::Test;
}

// Standardize per feature on the train split: zero mean, unit variance.
// Zero-variance features are centered but not scaled.
void standardize_train(Dataset& ds) {
    auto train_idx = ds.indices(Split::Train);
    if (train_idx.empty()) return;
    const double n = static_cast<double>(train_idx.size());
    for (Eigen::Index j = 0; j < ds.dim(); ++j) {
        double mean = 0.0;
        for (Eigen::Index i : train_idx) mean += ds.inputs(i, j);
        mean /= n;
        double var = 0.0;
        for (Eigen::Index i : train_idx) {
            double d = ds.inputs(i, j) - mean;
            var += d * d;
        }
        var /= n;
        const bool zero_var = var <= 1e-14 * std::max(1.0, mean * mean);
        const double scale = zero_var ? 1.0 : 1.0 / std::sqrt(var);
        for (Eigen::Index i = 0; i < ds.size(); ++i)
            ds.inputs(i, j) = (ds.inputs(i, j) - mean) * scale;
    }
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) {
        std::size_t b = cell.find_first_not_of(" \t\r");
        std::size_t e = cell.find_last_not_of(" \t\r");
        cells.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
    }
    if (!line.empty() && line.back() == ',') cells.push_back("");
    return cells;
}

} // namespace

Dataset ingest_csv(const std::string& path, const std::string& label_column,
                   const IngestOptions& options) {
    std::ifstream in(path);
    if (!in) throw FormatError("csv: cannot open " + path);

    std::string line;
    if (!std::getline(in, line)) throw FormatError("csv: " + path + " is empty (header required)");
    auto header = split_csv_line(line);
    Eigen::Index label_col = -1;
    for (std::size_t j = 0; j < header.size(); ++j)
        if (header[j] == label_column) label_col = static_cast<Eigen::Index>(j);
    if (label_col < 0)
        throw FormatError("csv: " + path + " has no column named '" + label_column + "'");

    const Eigen::Index n_cols = static_cast<Eigen::Index>(header.size());
    std::vector<std::vector<double>> rows;
    std::vector<int> labels;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto cells = split_csv_line(line);
        if (static_cast<Eigen::Index>(cells.size()) != n_cols)
            throw FormatError("csv: " + path + ":" + std::to_string(lineno) + ": expected " +
                              std::to_string(n_cols) + " columns, got " + std::to_string(cells.size()));
        std::vector<double> row;
        int label = 0;
        for (Eigen::Index j = 0; j < n_cols; ++j) {
            const std::string& cell = cells[static_cast<std::size_t>(j)];
            double v;
            try {
                std::size_t pos = 0;
                v = std::stod(cell, &pos);
                if (pos != cell.size()) throw std::invalid_argument(cell);
            } catch (const std::exception&) {
                throw FormatError("csv: " + path + ":" + std::to_string(lineno) +
                                  ": cannot parse value '" + cell + "'");
            }
            if (!std::isfinite(v))
                throw DataError("csv: " + path + ": non-finite entry at row " +
                                std::to_string(lineno));
            if (j == label_col) {
                double r = std::round(v);
                if (std::abs(v - r) > 1e-9 || r < 0)
                    throw DataError("csv: " + path + ":" + std::to_string(lineno) +
                                    ": label must be a non-negative integer, got '" + cell + "'");
                label = static_cast<int>(r);
            } else {
                row.push_back(v);
            }
        }
        rows.push_back(std::move(row));
        labels.push_back(label);
    }

    Dataset ds;
    const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
    const Eigen::Index d = n_cols - 1;
    ds.inputs.resize(n, d);
    ds.labels.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < d; ++j)
            ds.inputs(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        ds.labels(i) = labels[static_cast<std::size_t>(i)];
    }
    ds.n_classes = n > 0 ? ds.labels.maxCoeff() + 1 : 0;
    assign_splits(ds, options);
    standardize_train(ds);
    ds.meta.set("name", "csv:" + path);
    ds.meta.set("label_column", label_column);
    ds.meta.set_int("seed", static_cast<std::int64_t>(options.seed));
    ds.meta.set_double("test_fraction", options.test_fraction);
    ds.validate();
    return ds;
}

namespace {

std::uint32_t read_be_u32(std::ifstream& in, const std::string& path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw FormatError("idx: " + path + " truncated in header");
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
           std::uint32_t(b[3]);
}

} // namespace

Dataset ingest_idx(const std::string& images_path, const std::string& labels_path,
                   const IngestOptions& options) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw FormatError("idx: cannot open " + images_path);
    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) throw FormatError("idx: cannot open " + labels_path);

    const std::uint32_t img_magic = read_be_u32(img, images_path);
    if (img_magic != 0x00000803u)
        throw FormatError("idx: " + images_path + " has wrong magic number (expected 0x803)");
    const std::uint32_t n_img = read_be_u32(img, images_path);
    const std::uint32_t n_rows = read_be_u32(img, images_path);
    const std::uint32_t n_cols = read_be_u32(img, images_path);

    const std::uint32_t lab_magic = read_be_u32(lab, labels_path);
    if (lab_magic != 0x00000801u)
        throw FormatError("idx: " + labels_path + " has wrong magic number (expected 0x801)");
    const std::uint32_t n_lab = read_be_u32(lab, labels_path);
    if (n_lab != n_img)
        throw FormatError("idx: image/label counts differ (" + std::to_string(n_img) + " vs " +
                          std::to_string(n_lab) + ")");

    const Eigen::Index d = static_cast<Eigen::Index>(n_rows) * static_cast<Eigen::Index>(n_cols);
    Dataset ds;
    ds.inputs.resize(static_cast<Eigen::Index>(n_img), d);
    ds.labels.resize(static_cast<Eigen::Index>(n_img));

    std::vector<unsigned char> buf(static_cast<std::size_t>(d));
    for (std::uint32_t i = 0; i < n_img; ++i) {
        img.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!img)
            throw FormatError("idx: " + images_path + " truncated at image " + std::to_string(i));
        for (Eigen::Index j = 0; j < d; ++j)
            ds.inputs(static_cast<Eigen::Index>(i), j) =
                static_cast<double>(buf[static_cast<std::size_t>(j)]);
        unsigned char l;
        lab.read(reinterpret_cast<char*>(&l), 1);
        if (!lab)
            throw FormatError("idx: " + labels_path + " truncated at label " + std::to_string(i));
        ds.labels(static_cast<Eigen::Index>(i)) = static_cast<int>(l);
    }
    ds.n_classes = n_img > 0 ? ds.labels.maxCoeff() + 1 : 0;
    assign_splits(ds, options);
    standardize_train(ds);
    ds.meta.set("name", "idx:" + images_path);
    ds.meta.set_int("seed", static_cast<std::int64_t>(options.seed));
    ds.meta.set_double("test_fraction", options.test_fraction);
    ds.validate();
    return ds;
}

} // namespace rainbow
