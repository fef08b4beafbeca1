#pragma once

#include "rainbow/net.hpp"
#include "rainbow/types.hpp"

#include <optional>
#include <string>
#include <utility>

namespace rainbow {

/// Symmetric PSD Gram matrix with the 1/n normalization applied, so its
/// eigenvalues match those of the underlying activation covariance.
struct GramOperator {
    Matrix matrix;              // n x n, (1/n) sum of kernel values
    bool normalized = true;     // 1/n factor applied
    std::string source;         // "empirical layer j" | "analytic"

    Eigen::Index size() const { return matrix.rows(); }
    double trace() const { return matrix.trace(); }
    /// Kernel values without the 1/n factor.
    Matrix kernel_matrix() const { return matrix * static_cast<double>(matrix.rows()); }
    /// Symmetry and PSD-up-to-roundoff checks; throws NumericError.
    void validate() const;
};

struct SpectrumReport {
    Vector eigenvalues;      // non-increasing
    double fitted_exponent = 0.0;  // alpha in lambda_m ~ m^{-alpha}
    double intercept = 0.0;        // log-scale intercept of the fit
    int fit_low = 0;               // 1-based rank range of the fit
    int fit_high = 0;
    double fit_residual = 0.0;     // RMS residual in log space
};

/// (1/n) Phi Phi^T of an activation matrix.
GramOperator empirical_gram(const ActivationSet& activations);

/// Gram operator of an explicit kernel-value matrix (applies the 1/n factor).
GramOperator gram_from_kernel(const Matrix& kernel_values, const std::string& source);

/// Symmetric PSD (pseudo-)square root via eigendecomposition with
/// eigenvalues clamped at max(0, lambda).
Matrix psd_sqrt(const Matrix& m);

/// E_{w~N(0,C)}[relu<x,w> relu<x',w>]: the homogeneous arc-cosine kernel of
/// the covariance-colored inputs. Zero vectors return the limit value 0.
double arccos_kernel(const Vector& x, const Vector& x_prime, const Matrix& covariance);

/// Same kernel evaluated from Gram values q_xx = <z,z>, q_xy = <z,z'>,
/// q_yy = <z',z'>; used to cascade dot-product kernels across layers.
double arccos_from_gram(double q_xx, double q_xy, double q_yy);

/// Analytic Gaussian rainbow kernel values on a sample set: first layer uses
/// covariance C1, deeper layers use identity covariance (the dot-product
/// cascade). Returns the n x n kernel-value matrix at depth J.
Matrix gaussian_rainbow_kernel_matrix(const Matrix& inputs, const Matrix& c1, int depth);

/// Mean over all (i,i') pairs of squared kernel-value differences (the 1/n
/// Gram normalization removed so entries compare kernel values).
double kernel_mse(const GramOperator& gram_hat, const GramOperator& gram_ref);

/// Squared Bures-Wasserstein distance tr(T_hat) + tr(T) -
/// 2 tr((T^{1/2} T_hat T^{1/2})^{1/2}); tiny negative eigenvalues of the
/// inner product are clamped to 0.
double bures_wasserstein(const GramOperator& gram_hat, const GramOperator& gram_ref);

/// Entropic-regularization upper bound on BW^2:
/// ||T||_2 ||T_hat - T||_2 / lambda + tr(T_hat - T)
///   + 2 tr(T + lambda I - (T^2 + lambda^2 I)^{1/2}).
double entropic_bw_bound(const GramOperator& gram_hat, const GramOperator& gram_ref,
                         double lambda);

struct TailBoundCheck {
    double lhs = 0.0;   // sum_m (lambda_m + lambda - sqrt(lambda_m^2 + lambda^2))
    double rhs = 0.0;   // c' lambda^{1 - 1/alpha}, c' = c^{1/alpha} / (1 - 1/alpha)
    bool holds = false;
    bool premise_ok = false;  // eigenvalues actually satisfy lambda_m <= c m^{-alpha}
};

/// Spectral tail bound for eigenvalue sequences decaying as c m^{-alpha}.
/// A violated premise is reported in the result, not an error.
TailBoundCheck spectral_tail_bound_check(const Vector& eigenvalues, double alpha, double c,
                                         double lambda);

struct KpcaResult {
    Matrix basis;       // d x r, orthonormal columns, deterministic signs
    Vector spectrum;    // non-increasing eigenvalues of the uncentered covariance
    Matrix projected;   // n x r activations in the principal basis
};

/// Eigendecomposition of the uncentered activation covariance. The projected
/// activations have diagonal uncentered covariance with non-increasing
/// diagonal.
KpcaResult kpca(const ActivationSet& activations, std::optional<int> rank = std::nullopt);

struct PowerlawFitRange {
    int low = 0;   // 1-based ranks; 0 = default [max(6, 0.02 n), 0.5 n]
    int high = 0;
};

/// Least-squares slope of log(lambda_m) vs log(m) over the fit range.
SpectrumReport powerlaw_fit(const Vector& spectrum, PowerlawFitRange range = {});

/// Spectrum CSV export: rank,eigenvalue.
void save_spectrum_csv(const std::string& path, const Vector& spectrum);

} // namespace rainbow
