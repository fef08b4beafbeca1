#pragma once

#include "rainbow/train.hpp"
#include "rainbow/types.hpp"

#include <string>
#include <vector>

namespace rainbow {

/// Per-principal-direction decomposition of an SGD weight trajectory into
/// amplification a_r(t) = ||u_r(t)|| / ||u_r(0)|| and internal motion
/// c_r(t) = <u_r(t), u_r(0)> / (||u_r(t)|| ||u_r(0)||), where u_r(t) stacks
/// the projections of neuron weights onto the r-th basis vector. The basis
/// is the eigenbasis of the final estimated covariance, fixed across t.
struct DynamicsReport {
    struct Row {
        int layer = 0;
        int rank = 0;      // 1-based
        int epoch = 0;
        double amplification = 0.0;
        double cosine = 0.0;
        bool cosine_defined = true;
        bool skipped = false;  // ||u_r(0)|| = 0
    };
    struct Residual {
        int layer = 0;
        int epoch = 0;
        double value = 0.0;
    };
    std::vector<Row> rows;
    std::vector<Residual> residuals;  // reconstruction residual per (layer, epoch)
};

/// u_r(t)[i] = <w_i(t), e_r> for the requested ranks, at every snapshot.
/// Ranks are 1-based columns of the basis.
std::vector<std::vector<Vector>> neuron_projections(const TrainTrajectory& trajectory,
                                                    int layer, const Matrix& basis,
                                                    const std::vector<int>& ranks);

/// a_r(t) and c_r(t) per definition; t = 0 rows are exactly (1, 1).
DynamicsReport amplification_and_cosine(const TrainTrajectory& trajectory, int layer,
                                        const Matrix& basis, const std::vector<int>& ranks);

/// ||W(t) - W(0) B diag(a_r(t)) B^T||_F / ||W(t)||_F with B the full basis.
double covariance_reconstruction_check(const TrainTrajectory& trajectory, int layer,
                                       const Matrix& basis, int epoch);

/// CSV export: layer,rank,epoch,amplification,cosine,residual.
void save_dynamics_csv(const std::string& path, const DynamicsReport& report);

} // namespace rainbow
