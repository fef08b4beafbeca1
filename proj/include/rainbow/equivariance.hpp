#pragma once

#include "rainbow/net.hpp"
#include "rainbow/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace rainbow {

/// Finite subgroup of the orthogonal group O(d), stored as the explicit
/// element list (closure of the generators, identity first).
struct FiniteGroup {
    std::vector<Matrix> elements;
    int dim = 0;

    int order() const { return static_cast<int>(elements.size()); }
    void validate() const;
};

/// Breadth-first closure of orthogonal generators with matrix-equality
/// matching at tolerance 1e-8. Throws ParamError for non-orthogonal
/// generators or when the order exceeds max_order.
FiniteGroup close_group(const std::vector<Matrix>& generators, int max_order = 512);

/// Element constructors for the standard test groups.
Matrix sign_flip_element(int dim);              // -Identity
Matrix cyclic_shift_element(int dim);           // coordinate rotation by one
Matrix planar_rotation_element(int dim, int axis_a, int axis_b, double angle);
Matrix reflection_2d(double line_angle);

/// Group-average projection |G|^{-1} sum_g g^T C g. The result commutes
/// with every element, stays PSD, and is idempotent.
Matrix symmetrize_covariance(const Matrix& covariance, const FiniteGroup& group);

/// Max commutator norm ||g C - C g||_F / ||C||_F over the group.
double commutation_defect(const Matrix& covariance, const FiniteGroup& group);

struct InvarianceReport {
    double max_relative_deviation = 0.0;
    // (layer, element index, max deviation over sample pairs) rows
    struct Row {
        int layer = 0;
        int element = 0;
        double deviation = 0.0;
    };
    std::vector<Row> table;
};

/// Kernel invariance of a finite network: for random pairs (x, x') and each
/// group element g, |k_j(gx, gx') - k_j(x, x')| relative to the kernel
/// scale, maximized over pairs, per layer and element.
InvarianceReport test_kernel_invariance(const Network& net, const FiniteGroup& group,
                                        int n_samples, std::uint64_t seed);

/// Same test against the analytic Gaussian rainbow kernel (first-layer
/// covariance c1, identity covariance at deeper layers).
InvarianceReport test_kernel_invariance_analytic(const Matrix& c1, int depth,
                                                 const FiniteGroup& group, int n_samples,
                                                 std::uint64_t seed);

/// CSV export: layer,element,deviation.
void save_invariance_csv(const std::string& path, const InvarianceReport& report);

} // namespace rainbow
