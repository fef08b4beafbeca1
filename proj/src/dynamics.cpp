#include "rainbow/dynamics.hpp"

#include "rainbow/errors.hpp"
#include "rainbow/report.hpp"

#include <cmath>

namespace rainbow {

namespace {

const Matrix& layer_weights(const TrainTrajectory::Snapshot& snap, int layer) {
    if (layer < 1 || layer > static_cast<int>(snap.weights.size()))
        throw ParamError("dynamics: layer out of range");
    return snap.weights[static_cast<std::size_t>(layer - 1)];
}

void check_basis(const Matrix& w, const Matrix& basis, const std::vector<int>& ranks) {
    if (basis.rows() != w.cols()) throw ShapeError("dynamics: basis dim does not match weights");
    for (int r : ranks)
        if (r < 1 || r > basis.cols())
            throw ParamError("dynamics: rank " + std::to_string(r) + " outside basis");
}

} // namespace

std::vector<std::vector<Vector>> neuron_projections(const TrainTrajectory& trajectory, int layer,
                                                    const Matrix& basis,
                                                    const std::vector<int>& ranks) {
    if (trajectory.snapshots.empty()) throw ParamError("dynamics: empty trajectory");
    check_basis(layer_weights(trajectory.snapshots.front(), layer), basis, ranks);

    std::vector<std::vector<Vector>> out;  // [snapshot][rank]
    for (const auto& snap : trajectory.snapshots) {
        const Matrix& w = layer_weights(snap, layer);
        std::vector<Vector> per_rank;
        per_rank.reserve(ranks.size());
        for (int r : ranks) per_rank.push_back(w * basis.col(r - 1));
        out.push_back(std::move(per_rank));
    }
    return out;
}

DynamicsReport amplification_and_cosine(const TrainTrajectory& trajectory, int layer,
                                        const Matrix& basis, const std::vector<int>& ranks) {
    auto u = neuron_projections(trajectory, layer, basis, ranks);
    DynamicsReport report;
    for (std::size_t k = 0; k < ranks.size(); ++k) {
        const double norm0 = u[0][k].norm();
        for (std::size_t t = 0; t < trajectory.snapshots.size(); ++t) {
            DynamicsReport::Row row;
            row.layer = layer;
            row.rank = ranks[k];
            row.epoch = trajectory.snapshots[t].epoch;
            if (norm0 == 0.0) {
                row.skipped = true;
                row.cosine_defined = false;
                report.rows.push_back(row);
                continue;
            }
            if (t == 0) {
                // exact by definition at the initialization snapshot
                row.amplification = 1.0;
                row.cosine = 1.0;
                report.rows.push_back(row);
                continue;
            }
            const double norm_t = u[t][k].norm();
            row.amplification = norm_t / norm0;
            if (norm_t == 0.0) {
                row.cosine_defined = false;
            } else {
                row.cosine = u[t][k].dot(u[0][k]) / (norm_t * norm0);
            }
            report.rows.push_back(row);
        }
    }
    return report;
}

double covariance_reconstruction_check(const TrainTrajectory& trajectory, int layer,
                                       const Matrix& basis, int epoch) {
    const Matrix& w0 = layer_weights(trajectory.snapshots.front(), layer);
    const Matrix& wt = layer_weights(trajectory.at_epoch(epoch), layer);
    if (basis.rows() != w0.cols()) throw ShapeError("dynamics: basis dim does not match weights");

    // amplification per basis column; zero initial norm leaves the column
    // unscaled (a_r = 1)
    Matrix u0 = w0 * basis;
    Matrix ut = wt * basis;
    Vector amp(basis.cols());
    for (Eigen::Index r = 0; r < basis.cols(); ++r) {
        const double n0 = u0.col(r).norm();
        amp(r) = n0 > 0.0 ? ut.col(r).norm() / n0 : 1.0;
    }
    Matrix model = u0 * amp.asDiagonal() * basis.transpose();
    const double denom = wt.norm();
    if (denom == 0.0) return 0.0;
    return (wt - model).norm() / denom;
}

void save_dynamics_csv(const std::string& path, const DynamicsReport& report) {
    CsvTable table({"layer", "rank", "epoch", "amplification", "cosine", "residual"});
    auto residual_at = [&](int layer, int epoch) {
        for (const auto& res : report.residuals)
            if (res.layer == layer && res.epoch == epoch) return format_double(res.value);
        return std::string("nan");
    };
    for (const auto& row : report.rows) {
        table.add_row({std::to_string(row.layer), std::to_string(row.rank),
                       std::to_string(row.epoch),
                       row.skipped ? "skipped" : format_double(row.amplification),
                       row.cosine_defined ? format_double(row.cosine) : "undefined",
                       residual_at(row.layer, row.epoch)});
    }
    table.save(path);
}

} // namespace rainbow
