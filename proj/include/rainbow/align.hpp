#pragma once

#include "rainbow/net.hpp"
#include "rainbow/types.hpp"

#include <string>

namespace rainbow {

/// Orthogonal map between two activation spaces plus the decomposed
/// mean-square alignment error. `rotation` maps the hat space into the
/// reference space and has orthonormal columns whenever d_hat <= d_ref;
/// when d_hat > d_ref the reference is padded with zero columns so the map
/// embeds the smaller space isometrically.
struct AlignmentResult {
    Matrix rotation;          // d_ref x d_hat
    Vector singular_values;   // non-increasing
    double error = 0.0;       // closed form: trace_hat + trace_ref - 2*nuclear
    double error_direct = 0.0;  // mean-square error of the rotation, evaluated directly
    double trace_hat = 0.0;
    double trace_ref = 0.0;
    double nuclear = 0.0;
};

/// Uncentered cross-covariance (1/n) ref^T hat. Both sets must hold the
/// same samples in the same order.
Matrix cross_covariance(const ActivationSet& ref, const ActivationSet& hat);

/// Closed-form orthogonal Procrustes alignment via SVD of the uncentered
/// cross-covariance. Left singular vectors are sign-fixed (largest-magnitude
/// entry positive) so the rotation is deterministic; degenerate singular
/// values leave the null-space restriction arbitrary but do not affect the
/// error.
AlignmentResult procrustes_align(const ActivationSet& ref, const ActivationSet& hat);

/// Relative test error of a frozen alignment: E||A hat - ref||^2 / E||ref||^2.
double alignment_error_on_split(const AlignmentResult& result, const ActivationSet& ref_test,
                                const ActivationSet& hat_test);

/// Normalized nuclear-norm similarity in [0, 1]: ||E[ref hat^T]||_1 /
/// sqrt(E||ref||^2 E||hat||^2). Invariant to rotations of either side.
double similarity_score(const ActivationSet& ref, const ActivationSet& hat);

/// Alignment serialization: rotation in the flat-binary matrix format plus
/// a manifest recording sources, layer index, split, and sample count.
void save_alignment(const std::string& dir, const AlignmentResult& result,
                    const std::string& ref_source, const std::string& hat_source,
                    int layer_index, Split split, Eigen::Index n_samples);
AlignmentResult load_alignment(const std::string& dir);

} // namespace rainbow
