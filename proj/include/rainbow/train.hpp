#pragma once

#include "rainbow/dataset.hpp"
#include "rainbow/net.hpp"

#include <cstdint>
#include <vector>

namespace rainbow {

/// Time-indexed weight snapshots for dynamics analysis. Snapshot 0 is the
/// initialization; epochs are strictly increasing. Full matrices are stored
/// so that W_j(t) is exact.
struct TrainTrajectory {
    struct Snapshot {
        int epoch = 0;
        std::vector<Matrix> weights;
        Matrix readout;
    };
    std::vector<Snapshot> snapshots;
    KeyValueConfig config_echo;

    const Snapshot& at_epoch(int epoch) const;
};

struct LrSchedule {
    double base = 0.01;
    int step_every = 0;   // 0 = constant
    double decay = 0.1;   // multiplier applied every step_every epochs

    double at(int epoch) const;
};

struct TrainOptions {
    int epochs = 50;
    LrSchedule lr;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int batch_size = 128;
    int snapshot_every = 0;  // 0 = only init and final
    std::uint64_t seed = 0;
};

struct TrainMetrics {
    std::vector<double> train_loss;  // per epoch
    std::vector<double> train_accuracy;
    double final_test_accuracy = 0.0;
};

struct TrainResult {
    Network network;
    TrainTrajectory trajectory;
    TrainMetrics metrics;
};

/// Softmax cross-entropy SGD with momentum and weight decay. Standardization
/// statistics are recomputed per batch during training and frozen to
/// train-set statistics at the end. Throws TrainingError on divergence.
TrainResult train_sgd(const Network& net, const Dataset& data, const TrainOptions& options);

/// Maximum relative error between analytic gradients and central finite
/// differences over >= `min_coords` randomly chosen weight coordinates.
double gradient_check(const Network& net, const Matrix& inputs, const IntVector& labels,
                      double epsilon, int min_coords = 100, std::uint64_t seed = 0);

struct LossGradients {
    double loss = 0.0;
    std::vector<Matrix> weight_grads;
    Matrix readout_grad;
};

/// Softmax cross-entropy loss and its analytic gradients on one batch,
/// using per-batch standardization statistics (training mode).
LossGradients loss_and_gradients(const Network& net, const Matrix& inputs,
                                 const IntVector& labels);

/// Multinomial logistic regression on fixed features (deterministic
/// full-batch gradient descent). Returns the n_classes x d weight matrix.
Matrix fit_logistic_readout(const Matrix& features, const IntVector& labels, int n_classes,
                            int max_iters = 2000, double l2 = 1e-8);

} // namespace rainbow
