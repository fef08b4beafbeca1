#pragma once

#include "rainbow/types.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace rainbow {

// Seed-stream derivation: one experiment seed is expanded into independent
// per-purpose streams by hashing (seed, module, purpose, index). This keeps
// results stable when operations are reordered or run concurrently.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view module,
                                 std::string_view purpose, std::uint64_t index = 0) {
    constexpr std::uint64_t kOffset = 14695981039346656037ull;
    constexpr std::uint64_t kPrime = 1099511628211ull;
    std::uint64_t h = kOffset;
    auto mix_byte = [&](unsigned char b) {
        h ^= b;
        h *= kPrime;
    };
    auto mix_u64 = [&](std::uint64_t v) {
        for (int i = 0; i < 8; ++i) mix_byte(static_cast<unsigned char>(v >> (8 * i)));
    };
    auto mix_str = [&](std::string_view s) {
        for (char c : s) mix_byte(static_cast<unsigned char>(c));
        mix_byte(0);
    };
    mix_u64(seed);
    mix_str(module);
    mix_str(purpose);
    mix_u64(index);
    // splitmix finalizer to decorrelate nearby indices
    h ^= h >> 30;
    h *= 0xbf58476d1ce4e5b9ull;
    h ^= h >> 27;
    h *= 0x94d049bb133111ebull;
    h ^= h >> 31;
    return h;
}

// Deterministic random stream. Gaussian variates use Box-Muller on top of
// mt19937_64 so byte-identical reruns do not depend on the standard library's
// distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    Rng(std::uint64_t seed, std::string_view module, std::string_view purpose,
        std::uint64_t index = 0)
        : engine_(derive_seed(seed, module, purpose, index)) {}

    /// Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) {
        // rejection sampling to avoid modulo bias
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return v % n;
    }

    /// Standard normal variate.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols) {
        Matrix m(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal();
        return m;
    }

    Vector gaussian_vector(Eigen::Index n) {
        Vector v(n);
        for (Eigen::Index i = 0; i < n; ++i) v(i) = normal();
        return v;
    }

    /// Fisher-Yates shuffle of an index vector.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// Random orthogonal matrix (QR of a Gaussian, signs fixed so R has a
/// positive diagonal, which makes the result Haar-distributed).
Matrix random_orthogonal(Eigen::Index n, Rng& rng);

/// Random matrix with orthonormal columns, rows >= cols.
Matrix random_orthonormal_columns(Eigen::Index rows, Eigen::Index cols, Rng& rng);

} // namespace rainbow
