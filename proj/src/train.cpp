#include "rainbow/train.hpp"

#include "rainbow/errors.hpp"
#include "rainbow/rng.hpp"

#include <cmath>
#include <numeric>

namespace rainbow {

const TrainTrajectory::Snapshot& TrainTrajectory::at_epoch(int epoch) const {
    for (const auto& s : snapshots)
        if (s.epoch == epoch) return s;
    throw ParamError("trajectory: no snapshot at epoch " + std::to_string(epoch));
}

double LrSchedule::at(int epoch) const {
    if (step_every <= 0) return base;
    return base * std::pow(decay, epoch / step_every);
}

namespace {

Matrix patch_forward(const Matrix& values, const LayerSpec& spec) {
    if (!spec.prior) return values;
    const int channels = spec.in_channels;
    const int positions = spec.in_dim / channels;
    const int window = spec.prior->window;
    const int stride = spec.prior->stride;
    const int out_positions = (positions - window) / stride + 1;
    Matrix out(values.rows(), static_cast<Eigen::Index>(out_positions) * window * channels);
    for (int o = 0; o < out_positions; ++o)
        for (int w = 0; w < window; ++w)
            out.middleCols(static_cast<Eigen::Index>((o * window + w) * channels), channels) =
                values.middleCols(static_cast<Eigen::Index>((o * stride + w) * channels), channels);
    return out;
}

Matrix patch_backward(const Matrix& grad_out, const LayerSpec& spec) {
    if (!spec.prior) return grad_out;
    const int channels = spec.in_channels;
    const int positions = spec.in_dim / channels;
    const int window = spec.prior->window;
    const int stride = spec.prior->stride;
    const int out_positions = (positions - window) / stride + 1;
    Matrix grad_in = Matrix::Zero(grad_out.rows(), spec.in_dim);
    // overlapping windows accumulate
    for (int o = 0; o < out_positions; ++o)
        for (int w = 0; w < window; ++w)
            grad_in.middleCols(static_cast<Eigen::Index>((o * stride + w) * channels), channels) +=
                grad_out.middleCols(static_cast<Eigen::Index>((o * window + w) * channels), channels);
    return grad_in;
}

// One batch through the network in the raw training parameterization with
// per-batch standardization statistics. Keeps everything needed for the
// backward pass.
struct BatchPass {
    std::vector<Matrix> pre;     // patch-extracted inputs of each layer
    std::vector<Matrix> relu_z;  // post-nonlinearity, pre-standardization
    std::vector<Matrix> y;       // layer outputs
    std::vector<Vector> inv_std; // 1/sqrt(var + eps) per layer (standardized nets)
    Matrix logits;
    Matrix probs;
    double loss = 0.0;
};

BatchPass run_batch_forward(const Network& net, const Matrix& x, const IntVector& labels) {
    BatchPass p;
    const double batch = static_cast<double>(x.rows());
    Matrix h = x;
    for (int j = 1; j <= net.depth(); ++j) {
        const auto& spec = net.specs[static_cast<std::size_t>(j - 1)];
        Matrix pre = patch_forward(h, spec);
        Matrix z = pre * net.weights[static_cast<std::size_t>(j - 1)].transpose();
        if (spec.nonlinearity == Nonlinearity::ReLU) z = z.cwiseMax(0.0);
        p.pre.push_back(std::move(pre));
        if (net.standardize) {
            Vector mean = z.colwise().mean();
            Matrix centered = z.rowwise() - mean.transpose();
            Vector var = centered.array().square().colwise().sum() / batch;
            Vector inv_std = (var.array() + kStandardizeEpsilon).sqrt().inverse();
            Matrix y = centered.array().rowwise() * inv_std.transpose().array();
            p.relu_z.push_back(std::move(z));
            p.inv_std.push_back(std::move(inv_std));
            p.y.push_back(y);
            h = std::move(y);
        } else {
            p.relu_z.push_back(z);
            p.y.push_back(z);
            h = std::move(z);
        }
    }
    p.logits = h * net.readout.transpose();

    // row-wise stable softmax
    p.probs = p.logits;
    double loss = 0.0;
    for (Eigen::Index i = 0; i < p.probs.rows(); ++i) {
        const double m = p.probs.row(i).maxCoeff();
        p.probs.row(i) = (p.probs.row(i).array() - m).exp();
        const double s = p.probs.row(i).sum();
        p.probs.row(i) /= s;
        loss -= std::log(std::max(p.probs(i, labels(i)), 1e-300));
    }
    p.loss = loss / batch;
    return p;
}

struct Gradients {
    std::vector<Matrix> weights;
    Matrix readout;
};

Gradients run_batch_backward(const Network& net, const BatchPass& p, const IntVector& labels) {
    Gradients g;
    g.weights.resize(static_cast<std::size_t>(net.depth()));
    const double batch = static_cast<double>(p.logits.rows());

    Matrix dlogits = p.probs;
    for (Eigen::Index i = 0; i < dlogits.rows(); ++i) dlogits(i, labels(i)) -= 1.0;
    dlogits /= batch;

    g.readout = dlogits.transpose() * p.y.back();
    Matrix dy = dlogits * net.readout;

    for (int j = net.depth(); j >= 1; --j) {
        const auto& spec = net.specs[static_cast<std::size_t>(j - 1)];
        const std::size_t idx = static_cast<std::size_t>(j - 1);
        Matrix dz;
        if (net.standardize) {
            // y = (z - mean) * inv_std with batch statistics:
            // dz = inv_std * (dy - mean(dy) - y * mean(dy .* y))
            const Matrix& y = p.y[idx];
            Vector mean_dy = dy.colwise().mean();
            Vector mean_dyy = (dy.array() * y.array()).colwise().mean();
            dz = ((dy.rowwise() - mean_dy.transpose()).array() -
                  y.array().rowwise() * mean_dyy.transpose().array())
                     .rowwise() *
                 p.inv_std[idx].transpose().array();
        } else {
            dz = dy;
        }
        if (spec.nonlinearity == Nonlinearity::ReLU)
            dz = (p.relu_z[idx].array() > 0.0).select(dz, 0.0);
        g.weights[idx] = dz.transpose() * p.pre[idx];
        if (j > 1) {
            Matrix dpre = dz * net.weights[idx];
            dy = patch_backward(dpre, spec);
        }
    }
    return g;
}

} // namespace

TrainResult train_sgd(const Network& initial, const Dataset& data, const TrainOptions& options) {
    initial.validate();
    data.validate();
    if (options.epochs < 0) throw ParamError("train_sgd: epochs must be >= 0");
    if (options.batch_size < 2) throw ParamError("train_sgd: batch_size must be >= 2");

    TrainResult result;
    result.network = initial;
    Network& net = result.network;
    net.stats_frozen = false;

    Matrix train_x = data.inputs_for(Split::Train);
    IntVector train_y = data.labels_for(Split::Train);
    const Eigen::Index n = train_x.rows();
    if (n < 2) throw ParamError("train_sgd: need at least 2 training samples");

    auto snapshot = [&](int epoch) {
        result.trajectory.snapshots.push_back(
            TrainTrajectory::Snapshot{epoch, net.weights, net.readout});
    };
    snapshot(0);

    std::vector<Matrix> vel(net.weights.size());
    for (std::size_t j = 0; j < net.weights.size(); ++j)
        vel[j] = Matrix::Zero(net.weights[j].rows(), net.weights[j].cols());
    Matrix vel_readout = Matrix::Zero(net.readout.rows(), net.readout.cols());

    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 1; epoch <= options.epochs; ++epoch) {
        Rng shuffle_rng(options.seed, "train", "shuffle", static_cast<std::uint64_t>(epoch));
        shuffle_rng.shuffle(order);
        const double lr = options.lr.at(epoch - 1);

        double epoch_loss = 0.0;
        Eigen::Index epoch_correct = 0;
        Eigen::Index epoch_count = 0;
        for (Eigen::Index start = 0; start < n; start += options.batch_size) {
            const Eigen::Index bsz = std::min<Eigen::Index>(options.batch_size, n - start);
            if (bsz < 2) break;  // batch statistics need at least two samples
            Matrix bx(bsz, train_x.cols());
            IntVector by(bsz);
            for (Eigen::Index i = 0; i < bsz; ++i) {
                bx.row(i) = train_x.row(order[static_cast<std::size_t>(start + i)]);
                by(i) = train_y(order[static_cast<std::size_t>(start + i)]);
            }

            BatchPass pass = run_batch_forward(net, bx, by);
            if (!std::isfinite(pass.loss))
                throw TrainingError("train_sgd: non-finite loss at epoch " + std::to_string(epoch),
                                    epoch);
            Gradients grads = run_batch_backward(net, pass, by);

            auto step = [&](Matrix& w, Matrix& v, const Matrix& g) {
                if (options.weight_decay != 0.0)
                    v = options.momentum * v + g + options.weight_decay * w;
                else
                    v = options.momentum * v + g;
                w -= lr * v;
            };
            for (std::size_t j = 0; j < net.weights.size(); ++j)
                step(net.weights[j], vel[j], grads.weights[j]);
            step(net.readout, vel_readout, grads.readout);

            epoch_loss += pass.loss * static_cast<double>(bsz);
            for (Eigen::Index i = 0; i < bsz; ++i) {
                Eigen::Index arg;
                pass.logits.row(i).maxCoeff(&arg);
                if (arg == by(i)) ++epoch_correct;
            }
            epoch_count += bsz;
        }
        result.metrics.train_loss.push_back(epoch_loss / static_cast<double>(epoch_count));
        result.metrics.train_accuracy.push_back(static_cast<double>(epoch_correct) /
                                                static_cast<double>(epoch_count));

        const bool is_last = epoch == options.epochs;
        if ((options.snapshot_every > 0 && epoch % options.snapshot_every == 0) || is_last)
            if (result.trajectory.snapshots.back().epoch != epoch) snapshot(epoch);
    }

    freeze_normalization(net, train_x);
    if (net.standardize) net.stats_frozen = true;
    result.metrics.final_test_accuracy = accuracy(net, data, Split::Test);

    result.trajectory.config_echo.set_int("epochs", options.epochs);
    result.trajectory.config_echo.set_double("lr_base", options.lr.base);
    result.trajectory.config_echo.set_int("lr_step_every", options.lr.step_every);
    result.trajectory.config_echo.set_double("lr_decay", options.lr.decay);
    result.trajectory.config_echo.set_double("momentum", options.momentum);
    result.trajectory.config_echo.set_double("weight_decay", options.weight_decay);
    result.trajectory.config_echo.set_int("batch_size", options.batch_size);
    result.trajectory.config_echo.set_int("snapshot_every", options.snapshot_every);
    result.trajectory.config_echo.set_int("seed", static_cast<std::int64_t>(options.seed));
    return result;
}

LossGradients loss_and_gradients(const Network& net, const Matrix& inputs,
                                 const IntVector& labels) {
    BatchPass pass = run_batch_forward(net, inputs, labels);
    Gradients grads = run_batch_backward(net, pass, labels);
    return LossGradients{pass.loss, std::move(grads.weights), std::move(grads.readout)};
}

double gradient_check(const Network& net_in, const Matrix& inputs, const IntVector& labels,
                      double epsilon, int min_coords, std::uint64_t seed) {
    Network net = net_in;  // local copy; coordinates are perturbed in place
    BatchPass pass = run_batch_forward(net, inputs, labels);
    Gradients grads = run_batch_backward(net, pass, labels);

    struct Coord {
        int layer;  // 0 = readout
        Eigen::Index r, c;
    };
    std::vector<Coord> coords;
    Eigen::Index total = net.readout.size();
    for (const auto& w : net.weights) total += w.size();
    Rng rng(seed, "net", "gradient-check");
    const int n_coords = std::min<int>(min_coords, static_cast<int>(total));
    for (int k = 0; k < n_coords; ++k) {
        Eigen::Index flat = static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(total)));
        if (flat < net.readout.size()) {
            coords.push_back({0, flat / net.readout.cols(), flat % net.readout.cols()});
            continue;
        }
        flat -= net.readout.size();
        for (int j = 1; j <= net.depth(); ++j) {
            const Matrix& w = net.weights[static_cast<std::size_t>(j - 1)];
            if (flat < w.size()) {
                coords.push_back({j, flat / w.cols(), flat % w.cols()});
                break;
            }
            flat -= w.size();
        }
    }

    auto loss_at = [&]() { return run_batch_forward(net, inputs, labels).loss; };
    double max_rel = 0.0;
    for (const Coord& c : coords) {
        Matrix& w = c.layer == 0 ? net.readout : net.weights[static_cast<std::size_t>(c.layer - 1)];
        const double saved = w(c.r, c.c);
        w(c.r, c.c) = saved + epsilon;
        const double lp = loss_at();
        w(c.r, c.c) = saved - epsilon;
        const double lm = loss_at();
        w(c.r, c.c) = saved;
        const double fd = (lp - lm) / (2.0 * epsilon);
        const double an =
            c.layer == 0 ? grads.readout(c.r, c.c) : grads.weights[static_cast<std::size_t>(c.layer - 1)](c.r, c.c);
        const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

Matrix fit_logistic_readout(const Matrix& features, const IntVector& labels, int n_classes,
                            int max_iters, double l2) {
    const Eigen::Index n = features.rows();
    const Eigen::Index d = features.cols();
    if (n == 0) throw ParamError("logistic: empty feature matrix");
    if (labels.size() != n) throw ShapeError("logistic: label count mismatch");

    // Lipschitz constant of the softmax cross-entropy gradient:
    // L <= ||X||_2^2 / (2n) + l2. Power iteration on X^T X.
    Vector v = Vector::Ones(d).normalized();
    double s2 = 1.0;
    for (int it = 0; it < 50; ++it) {
        Vector u = features.transpose() * (features * v);
        s2 = u.norm();
        if (s2 == 0.0) break;
        v = u / s2;
    }
    const double lipschitz = s2 / (2.0 * static_cast<double>(n)) + l2;
    const double lr = 1.0 / std::max(lipschitz, 1e-12);
    const double beta = 0.9;

    Matrix w = Matrix::Zero(n_classes, d);
    Matrix vel = Matrix::Zero(n_classes, d);
    for (int it = 0; it < max_iters; ++it) {
        Matrix logits = features * w.transpose();
        Matrix probs = logits;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double m = probs.row(i).maxCoeff();
            probs.row(i) = (probs.row(i).array() - m).exp();
            probs.row(i) /= probs.row(i).sum();
        }
        for (Eigen::Index i = 0; i < n; ++i) probs(i, labels(i)) -= 1.0;
        Matrix grad = probs.transpose() * features / static_cast<double>(n) + l2 * w;
        if (grad.cwiseAbs().maxCoeff() < 1e-9) break;
        vel = beta * vel + grad;
        w -= lr * vel;
    }
    return w;
}

} // namespace rainbow
