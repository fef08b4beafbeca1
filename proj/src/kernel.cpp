#include "rainbow/kernel.hpp"

#include "rainbow/errors.hpp"
#include "rainbow/report.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <fstream>

namespace rainbow {

void GramOperator::validate() const {
    if (matrix.rows() != matrix.cols()) throw ShapeError("gram: matrix not square");
    const double scale = std::max(1.0, matrix.cwiseAbs().maxCoeff());
    if ((matrix - matrix.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
        throw NumericError("gram: matrix not symmetric");
    Eigen::SelfAdjointEigenSolver<Matrix> es(matrix, Eigen::EigenvaluesOnly);
    const double tr = std::max(matrix.trace(), 1e-300);
    if (es.eigenvalues().minCoeff() < -1e-10 * tr)
        throw NumericError("gram: matrix not PSD within tolerance");
    if (!std::isfinite(tr)) throw NumericError("gram: non-finite trace");
}

GramOperator empirical_gram(const ActivationSet& activations) {
    if (!activations.values.allFinite()) throw DataError("gram: non-finite activations");
    const double n = static_cast<double>(activations.values.rows());
    Matrix g = activations.values * activations.values.transpose() / n;
    g = ((g + g.transpose()) / 2.0).eval();
    GramOperator out;
    out.matrix = std::move(g);
    out.normalized = true;
    out.source = "empirical layer " + std::to_string(activations.layer_index);
    return out;
}

GramOperator gram_from_kernel(const Matrix& kernel_values, const std::string& source) {
    if (kernel_values.rows() != kernel_values.cols())
        throw ShapeError("gram: kernel matrix not square");
    GramOperator out;
    out.matrix = ((kernel_values + kernel_values.transpose()) / 2.0) /
                 static_cast<double>(kernel_values.rows());
    out.normalized = true;
    out.source = source;
    return out;
}

Matrix psd_sqrt(const Matrix& m) {
    Eigen::SelfAdjointEigenSolver<Matrix> es((m + m.transpose()) / 2.0);
    if (es.info() != Eigen::Success) throw NumericError("psd_sqrt: eigendecomposition failed");
    Vector lam = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    Matrix root = es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
    return ((root + root.transpose()) / 2.0).eval();
}

double arccos_from_gram(double q_xx, double q_xy, double q_yy) {
    if (q_xx <= 0.0 || q_yy <= 0.0) return 0.0;  // zero-vector limit
    const double norms = std::sqrt(q_xx * q_yy);
    double cos_theta = q_xy / norms;
    cos_theta = std::min(1.0, std::max(-1.0, cos_theta));
    const double theta = std::acos(cos_theta);
    return norms * (std::sin(theta) + (M_PI - theta) * cos_theta) / (2.0 * M_PI);
}

double arccos_kernel(const Vector& x, const Vector& x_prime, const Matrix& covariance) {
    if (x.size() != x_prime.size()) throw ShapeError("arccos_kernel: input dims differ");
    if (covariance.rows() != x.size() || covariance.cols() != x.size())
        throw ShapeError("arccos_kernel: covariance dim mismatch");
    const Vector cx = covariance * x;
    const Vector cxp = covariance * x_prime;
    return arccos_from_gram(x.dot(cx), x.dot(cxp), x_prime.dot(cxp));
}

Matrix gaussian_rainbow_kernel_matrix(const Matrix& inputs, const Matrix& c1, int depth) {
    if (depth < 1) throw ParamError("rainbow kernel: depth must be >= 1");
    if (c1.rows() != inputs.cols() || c1.cols() != inputs.cols())
        throw ShapeError("rainbow kernel: covariance dim mismatch");
    const Eigen::Index n = inputs.rows();
    Matrix q = inputs * c1 * inputs.transpose();
    Matrix k(n, n);
    for (int j = 1; j <= depth; ++j) {
        for (Eigen::Index a = 0; a < n; ++a)
            for (Eigen::Index b = a; b < n; ++b)
                k(a, b) = k(b, a) = arccos_from_gram(q(a, a), q(a, b), q(b, b));
        q = k;
    }
    return k;
}

double kernel_mse(const GramOperator& gram_hat, const GramOperator& gram_ref) {
    if (gram_hat.size() != gram_ref.size())
        throw ShapeError("kernel_mse: Gram sizes differ");
    const Matrix diff = gram_hat.kernel_matrix() - gram_ref.kernel_matrix();
    return diff.array().square().mean();
}

double bures_wasserstein(const GramOperator& gram_hat, const GramOperator& gram_ref) {
    if (gram_hat.size() != gram_ref.size()) throw ShapeError("bw: Gram sizes differ");
    const Matrix& t_hat = gram_hat.matrix;
    const Matrix& t_ref = gram_ref.matrix;

    auto check_psd = [](const Matrix& t, const char* which) {
        Eigen::SelfAdjointEigenSolver<Matrix> es((t + t.transpose()) / 2.0,
                                                 Eigen::EigenvaluesOnly);
        const double tr = std::max(std::abs(t.trace()), 1e-300);
        if (es.eigenvalues().minCoeff() < -1e-8 * tr)
            throw NumericError(std::string("bw: ") + which + " operator not PSD within tolerance");
    };
    check_psd(t_hat, "hat");
    check_psd(t_ref, "ref");

    Matrix root = psd_sqrt(t_ref);
    Matrix inner = root * t_hat * root;
    Eigen::SelfAdjointEigenSolver<Matrix> es((inner + inner.transpose()) / 2.0,
                                             Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success) throw NumericError("bw: eigendecomposition failed");
    const double cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    return std::max(0.0, t_hat.trace() + t_ref.trace() - 2.0 * cross);
}

double entropic_bw_bound(const GramOperator& gram_hat, const GramOperator& gram_ref,
                         double lambda) {
    if (lambda <= 0.0) throw ParamError("entropic_bw_bound: lambda must be > 0");
    if (gram_hat.size() != gram_ref.size())
        throw ShapeError("entropic_bw_bound: Gram sizes differ");
    const Matrix& t_hat = gram_hat.matrix;
    const Matrix& t_ref = gram_ref.matrix;

    const double hs_ref = t_ref.norm();
    const double hs_diff = (t_hat - t_ref).norm();
    const double trace_term = t_hat.trace() - t_ref.trace();

    Eigen::SelfAdjointEigenSolver<Matrix> es((t_ref + t_ref.transpose()) / 2.0,
                                             Eigen::EigenvaluesOnly);
    double reg = 0.0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
        const double lm = std::max(0.0, es.eigenvalues()(i));
        reg += lm + lambda - std::sqrt(lm * lm + lambda * lambda);
    }
    return hs_ref * hs_diff / lambda + trace_term + 2.0 * reg;
}

TailBoundCheck spectral_tail_bound_check(const Vector& eigenvalues, double alpha, double c,
                                         double lambda) {
    if (alpha <= 1.0) throw ParamError("tail bound: alpha must be > 1");
    if (c <= 0.0) throw ParamError("tail bound: c must be > 0");
    if (lambda <= 0.0) throw ParamError("tail bound: lambda must be > 0");

    TailBoundCheck out;
    out.premise_ok = true;
    for (Eigen::Index m = 0; m < eigenvalues.size(); ++m) {
        const double bound = c * std::pow(static_cast<double>(m + 1), -alpha);
        if (eigenvalues(m) > bound * (1.0 + 1e-9)) out.premise_ok = false;
        const double lm = std::max(0.0, eigenvalues(m));
        out.lhs += lm + lambda - std::sqrt(lm * lm + lambda * lambda);
    }
    out.rhs = std::pow(c, 1.0 / alpha) / (1.0 - 1.0 / alpha) * std::pow(lambda, 1.0 - 1.0 / alpha);
    out.holds = out.lhs <= out.rhs;
    return out;
}

KpcaResult kpca(const ActivationSet& activations, std::optional<int> rank) {
    const Eigen::Index n = activations.values.rows();
    const Eigen::Index d = activations.values.cols();
    if (n < 2) throw ParamError("kpca: need at least 2 samples");

    Matrix cov = activations.values.transpose() * activations.values / static_cast<double>(n);
    cov = ((cov + cov.transpose()) / 2.0).eval();
    Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
    if (es.info() != Eigen::Success) throw NumericError("kpca: eigendecomposition failed");

    const Eigen::Index r = std::min<Eigen::Index>(rank.value_or(static_cast<int>(d)), d);
    KpcaResult out;
    out.basis.resize(d, r);
    out.spectrum.resize(r);
    for (Eigen::Index k = 0; k < r; ++k) {
        // eigenvalues come back ascending; take from the top
        const Eigen::Index src = d - 1 - k;
        Vector v = es.eigenvectors().col(src);
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0) v = -v;
        out.basis.col(k) = v;
        out.spectrum(k) = std::max(0.0, es.eigenvalues()(src));
    }
    out.projected = activations.values * out.basis;
    return out;
}

SpectrumReport powerlaw_fit(const Vector& spectrum, PowerlawFitRange range) {
    const int n = static_cast<int>(spectrum.size());
    int lo = range.low;
    int hi = range.high;
    if (lo == 0 && hi == 0) {
        lo = std::max(6, static_cast<int>(std::ceil(0.02 * n)));
        hi = static_cast<int>(std::floor(0.5 * n));
    }
    if (lo < 1 || hi > n || hi - lo + 1 < 5)
        throw ParamError("powerlaw_fit: need at least 5 ranks in [1, n], got [" +
                         std::to_string(lo) + ", " + std::to_string(hi) + "] with n=" +
                         std::to_string(n));
    for (int m = lo; m <= hi; ++m)
        if (spectrum(m - 1) <= 0.0)
            throw ParamError("powerlaw_fit: nonpositive eigenvalue at rank " + std::to_string(m));

    const int count = hi - lo + 1;
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    for (int m = lo; m <= hi; ++m) {
        const double x = std::log(static_cast<double>(m));
        const double y = std::log(spectrum(m - 1));
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    const double mean_x = sx / count;
    const double mean_y = sy / count;
    const double var_x = sxx / count - mean_x * mean_x;
    if (var_x <= 0.0) throw ParamError("powerlaw_fit: degenerate rank range");
    const double slope = (sxy / count - mean_x * mean_y) / var_x;

    SpectrumReport report;
    report.eigenvalues = spectrum;
    report.fitted_exponent = -slope;
    report.intercept = mean_y - slope * mean_x;
    report.fit_low = lo;
    report.fit_high = hi;
    double ss = 0.0;
    for (int m = lo; m <= hi; ++m) {
        const double pred = report.intercept + slope * std::log(static_cast<double>(m));
        const double res = std::log(spectrum(m - 1)) - pred;
        ss += res * res;
    }
    report.fit_residual = std::sqrt(ss / count);
    return report;
}

void save_spectrum_csv(const std::string& path, const Vector& spectrum) {
    CsvTable table({"rank", "eigenvalue"});
    for (Eigen::Index m = 0; m < spectrum.size(); ++m)
        table.add_row({std::to_string(m + 1), format_double(spectrum(m))});
    table.save(path);
}

} // namespace rainbow
