#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "rainbow/align.hpp"
#include "rainbow/errors.hpp"
#include "rainbow/kernel.hpp"
#include "rainbow/rng.hpp"

#include <algorithm>
#include <cmath>

using namespace rainbow;

namespace {

ActivationSet make_acts(const Matrix& values) { return ActivationSet{values, 1, Split::Train, true}; }

// test-local cyclic Jacobi eigensolver for small symmetric matrices
void jacobi_eigens(Matrix a, Vector& values, Matrix& vectors) {
    const Eigen::Index n = a.rows();
    vectors = Matrix::Identity(n, n);
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (Eigen::Index p = 0; p < n; ++p)
            for (Eigen::Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (off < 1e-26) break;
        for (Eigen::Index p = 0; p < n; ++p) {
            for (Eigen::Index q = p + 1; q < n; ++q) {
                if (std::abs(a(p, q)) < 1e-300) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                Matrix g = Matrix::Identity(n, n);
                g(p, p) = c;
                g(q, q) = c;
                g(p, q) = s;
                g(q, p) = -s;
                a = g.transpose() * a * g;
                vectors = vectors * g;
            }
        }
    }
    values = a.diagonal();
}

} // namespace

TEST_CASE("empirical gram: one-hot activations give identity over n") {
    ActivationSet acts = make_acts(Matrix::Identity(6, 6));
    GramOperator g = empirical_gram(acts);
    g.validate();
    CHECK((g.matrix - Matrix::Identity(6, 6) / 6.0).cwiseAbs().maxCoeff() <= 1e-14);
}

TEST_CASE("empirical gram: primal and dual eigenvalues coincide") {
    Rng rng(1, "test", "dual");
    Matrix phi = rng.gaussian_matrix(12, 5);
    GramOperator g = empirical_gram(make_acts(phi));
    Matrix cov = phi.transpose() * phi / 12.0;
    Eigen::SelfAdjointEigenSolver<Matrix> eg(g.matrix), ec(cov);
    Vector gram_eigs = eg.eigenvalues().reverse();
    Vector cov_eigs = ec.eigenvalues().reverse();
    for (int k = 0; k < 5; ++k)
        CHECK(std::abs(gram_eigs(k) - cov_eigs(k)) <= 1e-10 * std::max(1.0, cov_eigs(0)));
    for (int k = 5; k < 12; ++k) CHECK(std::abs(gram_eigs(k)) <= 1e-10);
}

TEST_CASE("empirical gram: duplicated samples duplicate rows without changing rank") {
    Rng rng(2, "test", "dup");
    Matrix phi = rng.gaussian_matrix(6, 4);
    Matrix dup(7, 4);
    dup << phi, phi.row(2);
    GramOperator g = empirical_gram(make_acts(dup));
    CHECK((g.matrix.row(2) - g.matrix.row(6)).cwiseAbs().maxCoeff() <= 1e-14);
    CHECK((g.matrix.col(2) - g.matrix.col(6)).cwiseAbs().maxCoeff() <= 1e-14);
    Eigen::SelfAdjointEigenSolver<Matrix> es(g.matrix);
    int rank = 0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i)
        if (es.eigenvalues()(i) > 1e-10) ++rank;
    CHECK(rank == 4);
}

TEST_CASE("arccos kernel: closed-form values") {
    Matrix id = Matrix::Identity(3, 3);
    Vector x(3), y(3);
    x << 1, 2, 2;  // norm 3
    CHECK(arccos_kernel(x, x, id) == doctest::Approx(4.5).epsilon(1e-12));  // ||x||^2 / 2

    Vector e1 = Vector::Zero(3), e2 = Vector::Zero(3);
    e1(0) = 1;
    e2(1) = 1;
    CHECK(arccos_kernel(e1, e2, id) == doctest::Approx(1.0 / (2.0 * M_PI)).epsilon(1e-12));

    y = -x;
    CHECK(arccos_kernel(x, y, id) == doctest::Approx(0.0));
    CHECK(arccos_kernel(Vector::Zero(3), x, id) == 0.0);
}

TEST_CASE("arccos kernel: Monte-Carlo consistency with colored covariance") {
    Rng rng(3, "test", "mc");
    Matrix a = rng.gaussian_matrix(3, 3);
    Matrix c = a * a.transpose();
    Matrix root = psd_sqrt(c);
    Vector x = rng.gaussian_vector(3);
    Vector y = rng.gaussian_vector(3);

    const double exact = arccos_kernel(x, y, c);
    const int n = 1000000;
    double mean = 0.0, m2 = 0.0;
    for (int i = 0; i < n; ++i) {
        Vector w = root * rng.gaussian_vector(3);
        const double v = std::max(0.0, x.dot(w)) * std::max(0.0, y.dot(w));
        const double delta = v - mean;
        mean += delta / (i + 1);
        m2 += delta * (v - mean);
    }
    const double se = std::sqrt(m2 / n / n);
    CHECK(std::abs(mean - exact) <= 3.0 * se + 1e-12);
    CHECK(std::abs(mean - exact) <= 0.01 * std::max(1.0, exact));
}

TEST_CASE("kernel mse: exact cases and the width-rate check") {
    Rng rng(4, "test", "mse");
    Matrix phi = rng.gaussian_matrix(10, 4);
    GramOperator g = empirical_gram(make_acts(phi));
    CHECK(kernel_mse(g, g) == 0.0);

    GramOperator shifted = g;
    shifted.matrix.array() += 0.7 / 10.0;  // kernel values shift by 0.7
    CHECK(kernel_mse(shifted, g) == doctest::Approx(0.49).epsilon(1e-10));

    // random-feature Gram MSE decreases like 1/width: d=64 vs d=256
    const int d0 = 8, n = 200;
    Matrix x = rng.gaussian_matrix(n, d0);
    GramOperator analytic =
        gram_from_kernel(gaussian_rainbow_kernel_matrix(x, Matrix::Identity(d0, d0), 1),
                         "analytic");
    auto mse_at_width = [&](int d1) {
        double acc = 0.0;
        for (int draw = 0; draw < 20; ++draw) {
            Rng wrng(5, "test", "mse-draw", static_cast<std::uint64_t>(d1 * 100 + draw));
            Matrix w = wrng.gaussian_matrix(d1, d0);
            Matrix feats = (x * w.transpose()).cwiseMax(0.0) / std::sqrt(static_cast<double>(d1));
            acc += kernel_mse(empirical_gram(make_acts(feats)), analytic);
        }
        return acc / 20.0;
    };
    const double ratio = mse_at_width(64) / (4.0 * mse_at_width(256));
    CHECK(ratio > 1.0 / 3.0);
    CHECK(ratio < 3.0);
}

TEST_CASE("bures-wasserstein: exact cases") {
    Rng rng(6, "test", "bw");
    Matrix a = rng.gaussian_matrix(8, 8);
    GramOperator t = gram_from_kernel(a * a.transpose(), "analytic");
    CHECK(bures_wasserstein(t, t) <= 1e-10);

    const int n = 5;
    GramOperator ta = gram_from_kernel(3.0 * static_cast<double>(n) * Matrix::Identity(n, n), "a");
    GramOperator tb = gram_from_kernel(7.0 * static_cast<double>(n) * Matrix::Identity(n, n), "b");
    const double expected = n * std::pow(std::sqrt(3.0) - std::sqrt(7.0), 2.0);
    CHECK(bures_wasserstein(ta, tb) == doctest::Approx(expected).epsilon(1e-10));
}

TEST_CASE("bures-wasserstein: equals the Procrustes error of square-root features") {
    Rng rng(7, "test", "bw-proc");
    const int n = 16;
    Matrix a = rng.gaussian_matrix(n, n);
    Matrix b = rng.gaussian_matrix(n, n);
    GramOperator t_hat = gram_from_kernel(a * a.transpose(), "hat");
    GramOperator t_ref = gram_from_kernel(b * b.transpose(), "ref");

    // feature sets whose Grams are t_hat and t_ref: rows of sqrt(n) * T^{1/2}
    Matrix hat_feats = std::sqrt(static_cast<double>(n)) * psd_sqrt(t_hat.matrix);
    Matrix ref_feats = std::sqrt(static_cast<double>(n)) * psd_sqrt(t_ref.matrix);
    const double align_error = procrustes_align(make_acts(ref_feats), make_acts(hat_feats)).error;
    const double bw = bures_wasserstein(t_hat, t_ref);
    CHECK(std::abs(align_error - bw) <= 1e-6 * std::max(bw, 1e-12));
}

TEST_CASE("bures-wasserstein: rejects non-PSD input") {
    Matrix bad = -Matrix::Identity(4, 4);
    GramOperator g;
    g.matrix = bad;
    g.source = "bad";
    GramOperator ok = gram_from_kernel(Matrix::Identity(4, 4), "ok");
    CHECK_THROWS_AS(bures_wasserstein(g, ok), NumericError);
}

TEST_CASE("entropic bound: hand-computed diagonal case and limits") {
    GramOperator t = gram_from_kernel(2.0 * Matrix::Identity(2, 2).eval(), "t");
    t.matrix << 1, 0, 0, 0;  // T = diag(1, 0)
    GramOperator t_hat = t;
    t_hat.matrix << 0, 0, 0, 1;  // T_hat = diag(0, 1)

    const double bound = entropic_bw_bound(t_hat, t, 1.0);
    CHECK(bound == doctest::Approx(4.0 - std::sqrt(2.0)).epsilon(1e-12));
    CHECK(bound >= bures_wasserstein(t_hat, t));

    // identical operators: bound = 2 tr(T + lambda - sqrt(T^2 + lambda^2)) -> 0
    CHECK(entropic_bw_bound(t, t, 1e-9) <= 1e-8);
    CHECK(entropic_bw_bound(t, t, 0.5) >= 0.0);
    CHECK_THROWS_AS(entropic_bw_bound(t, t, 0.0), ParamError);
}

TEST_CASE("entropic bound dominates bures-wasserstein on random pairs") {
    Rng rng(8, "test", "dom");
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 4 + static_cast<int>(rng.uniform_int(12));
        Matrix a = rng.gaussian_matrix(n, n);
        Matrix b = rng.gaussian_matrix(n, n);
        GramOperator t_hat = gram_from_kernel(a * a.transpose(), "hat");
        GramOperator t_ref = gram_from_kernel(b * b.transpose(), "ref");
        const double bw = bures_wasserstein(t_hat, t_ref);
        for (double lambda : {1e-3, 1e-1, 1.0, 10.0})
            CHECK(entropic_bw_bound(t_hat, t_ref, lambda) >= bw);
    }
}

TEST_CASE("spectral tail bound: exact power law, zeros, large lambda") {
    Vector eigs(1000);
    for (int m = 0; m < 1000; ++m) eigs(m) = std::pow(static_cast<double>(m + 1), -2.0);
    TailBoundCheck c1 = spectral_tail_bound_check(eigs, 2.0, 1.0, 0.01);
    CHECK(c1.premise_ok);
    CHECK(c1.holds);

    TailBoundCheck c2 = spectral_tail_bound_check(Vector::Zero(10), 2.0, 1.0, 0.5);
    CHECK(c2.lhs == 0.0);
    CHECK(c2.holds);

    Vector few(5);
    few << 1.0, 0.5, 0.25, 0.125, 0.0625;
    TailBoundCheck c3 = spectral_tail_bound_check(few, 2.0, 1.0, 1e12);
    CHECK(c3.holds);
    CHECK(c3.lhs == doctest::Approx(few.sum()).epsilon(1e-6));  // lhs -> sum of eigenvalues

    Vector bad(3);
    bad << 2.0, 1.0, 0.5;  // violates lambda_m <= m^{-2}
    CHECK_FALSE(spectral_tail_bound_check(bad, 2.0, 1.0, 0.1).premise_ok);
    CHECK_THROWS_AS(spectral_tail_bound_check(few, 0.5, 1.0, 0.1), ParamError);
}

TEST_CASE("kpca: white activations, rank-1 sets, eigensolver oracle") {
    Rng rng(9, "test", "kpca");

    // white: uncentered covariance proportional to identity
    const int n = 12, d = 4;
    Matrix q = random_orthonormal_columns(n, d, rng);
    Matrix white = std::sqrt(static_cast<double>(n)) * q;
    KpcaResult kw = kpca(make_acts(white));
    for (int k = 0; k < d; ++k) CHECK(kw.spectrum(k) == doctest::Approx(1.0).epsilon(1e-10));
    // orthogonal re-expression: identical Gram
    Matrix g0 = white * white.transpose();
    Matrix g1 = kw.projected * kw.projected.transpose();
    CHECK((g0 - g1).cwiseAbs().maxCoeff() <= 1e-8);

    // rank-1: single nonzero eigenvalue equal to the mean squared norm
    Vector u = rng.gaussian_vector(6), v = rng.gaussian_vector(3);
    Matrix rank1 = u * v.transpose();
    KpcaResult k1 = kpca(make_acts(rank1));
    CHECK(k1.spectrum(0) == doctest::Approx(rank1.squaredNorm() / 6.0).epsilon(1e-10));
    for (Eigen::Index k = 1; k < k1.spectrum.size(); ++k) CHECK(k1.spectrum(k) <= 1e-12);

    // 5x3 random: eigenpairs match the test-local Jacobi solver
    Matrix phi = rng.gaussian_matrix(5, 3);
    KpcaResult kr = kpca(make_acts(phi));
    Matrix cov = phi.transpose() * phi / 5.0;
    Vector jvals;
    Matrix jvecs;
    jacobi_eigens(cov, jvals, jvecs);
    std::vector<double> sorted(jvals.data(), jvals.data() + 3);
    std::sort(sorted.begin(), sorted.end(), std::greater<double>());
    for (int k = 0; k < 3; ++k) CHECK(std::abs(kr.spectrum(k) - sorted[k]) <= 1e-10);
    // reconstruction identity avoids eigenvector sign conventions
    Matrix recon = kr.basis * kr.spectrum.asDiagonal() * kr.basis.transpose();
    CHECK((recon - cov).cwiseAbs().maxCoeff() <= 1e-10);
    // projected activations have diagonal covariance with the spectrum on it
    Matrix proj_cov = kr.projected.transpose() * kr.projected / 5.0;
    CHECK((proj_cov - Matrix(kr.spectrum.asDiagonal())).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("powerlaw fit: exact laws and noisy recovery") {
    Vector exact(100);
    for (int m = 0; m < 100; ++m) exact(m) = 1.0 / (m + 1);
    SpectrumReport r1 = powerlaw_fit(exact);
    CHECK(r1.fitted_exponent == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r1.fit_residual <= 1e-12);

    Vector scaled(100);
    for (int m = 0; m < 100; ++m) scaled(m) = 7.0 * std::pow(static_cast<double>(m + 1), -2.0);
    SpectrumReport r2 = powerlaw_fit(scaled);
    CHECK(r2.fitted_exponent == doctest::Approx(2.0).epsilon(1e-10));
    CHECK(r2.intercept == doctest::Approx(std::log(7.0)).epsilon(1e-10));

    Rng rng(10, "test", "noise");
    Vector noisy(100);
    for (int m = 0; m < 100; ++m)
        noisy(m) = (1.0 + 0.05 * rng.uniform(-1.0, 1.0)) / (m + 1);
    CHECK(std::abs(powerlaw_fit(noisy).fitted_exponent - 1.0) <= 0.1);

    Vector with_zero = exact;
    with_zero(20) = 0.0;
    CHECK_THROWS_AS(powerlaw_fit(with_zero), ParamError);
    CHECK_THROWS_AS(powerlaw_fit(exact, PowerlawFitRange{1, 3}), ParamError);
}

TEST_CASE("trace bound: analytic gram trace bounded by covariance norm times energy") {
    Rng rng(11, "test", "trace");
    for (int trial = 0; trial < 20; ++trial) {
        const int d = 3 + static_cast<int>(rng.uniform_int(5));
        const int n = 20;
        Matrix a = rng.gaussian_matrix(d, d);
        Matrix c = a * a.transpose() / d;
        Matrix x = rng.gaussian_matrix(n, d);
        GramOperator g = gram_from_kernel(gaussian_rainbow_kernel_matrix(x, c, 1), "analytic");
        Eigen::SelfAdjointEigenSolver<Matrix> es(c, Eigen::EigenvaluesOnly);
        const double c_norm = es.eigenvalues().maxCoeff();
        const double energy = x.squaredNorm() / n;  // empirical E||x||^2
        CHECK(g.trace() <= c_norm * energy + 1e-10);
    }
}

TEST_CASE("gram validation rejects asymmetric and indefinite matrices") {
    GramOperator bad;
    bad.matrix = Matrix::Zero(3, 3);
    bad.matrix(0, 1) = 1.0;  // asymmetric
    CHECK_THROWS_AS(bad.validate(), NumericError);

    GramOperator indef;
    indef.matrix = Matrix::Identity(3, 3);
    indef.matrix(2, 2) = -1.0;
    CHECK_THROWS_AS(indef.validate(), NumericError);
}
