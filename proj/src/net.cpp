#include "rainbow/net.hpp"

#include "rainbow/config.hpp"
#include "rainbow/errors.hpp"
#include "rainbow/matrix_io.hpp"
#include "rainbow/rng.hpp"

#include <cmath>
#include <filesystem>
#include <string>

namespace rainbow {

int LayerSpec::weight_in_dim() const {
    if (!prior) return in_dim;
    const int positions = in_dim / in_channels;
    const int out_positions = (positions - prior->window) / prior->stride + 1;
    return out_positions * prior->window * in_channels;
}

void LayerSpec::validate() const {
    if (in_dim < 1 || out_dim < 1) throw ParamError("layer: dims must be >= 1");
    if (prior) {
        if (in_channels < 1) throw ParamError("layer: in_channels must be >= 1");
        if (in_dim % in_channels != 0)
            throw ParamError("layer: in_dim must be divisible by in_channels");
        const int positions = in_dim / in_channels;
        if (prior->window < 1 || prior->window > positions)
            throw ParamError("layer: patch window must be in [1, positions]");
        if (prior->stride < 1) throw ParamError("layer: patch stride must be >= 1");
    }
}

void Network::validate() const {
    if (specs.size() != weights.size()) throw ParamError("network: specs/weights size mismatch");
    for (std::size_t j = 0; j < specs.size(); ++j) {
        specs[j].validate();
        if (j > 0 && specs[j].in_dim != specs[j - 1].out_dim)
            throw ShapeError("network: layer " + std::to_string(j + 1) +
                             " input dim does not chain with previous output dim");
        if (weights[j].rows() != specs[j].out_dim ||
            weights[j].cols() != specs[j].weight_in_dim())
            throw ShapeError("network: layer " + std::to_string(j + 1) + " weight shape mismatch");
        if (!weights[j].allFinite())
            throw DataError("network: non-finite weight at layer " + std::to_string(j + 1));
    }
    if (standardize && stats_frozen) {
        if (norm_stats.size() != specs.size())
            throw ParamError("network: norm_stats missing for standardized network");
        for (std::size_t j = 0; j < norm_stats.size(); ++j) {
            if (norm_stats[j].mean.size() != specs[j].out_dim ||
                norm_stats[j].var.size() != specs[j].out_dim)
                throw ShapeError("network: norm_stats shape mismatch at layer " +
                                 std::to_string(j + 1));
            if ((norm_stats[j].var.array() < 0.0).any())
                throw DataError("network: negative frozen variance at layer " +
                                std::to_string(j + 1));
        }
    }
    if (readout.size() > 0 && !weights.empty() && readout.cols() != specs.back().out_dim)
        throw ShapeError("network: readout dim does not match last layer");
}

Network init_network(std::vector<LayerSpec> specs, int n_classes, InitKind init,
                     std::uint64_t seed, bool standardize) {
    if (specs.empty()) throw ParamError("init_network: no layers");
    for (const auto& s : specs) s.validate();
    Network net;
    net.specs = std::move(specs);
    net.standardize = standardize;
    net.seed = seed;

    const double u_bound = std::sqrt(3.0);  // unit-variance uniform support
    for (std::size_t j = 0; j < net.specs.size(); ++j) {
        Rng rng(seed, "net", "init-layer", j + 1);
        const auto& s = net.specs[j];
        Matrix w(s.out_dim, s.weight_in_dim());
        for (Eigen::Index r = 0; r < w.rows(); ++r)
            for (Eigen::Index c = 0; c < w.cols(); ++c)
                w(r, c) = init == InitKind::Gaussian ? rng.normal()
                                                     : rng.uniform(-u_bound, u_bound);
        net.weights.push_back(std::move(w));
    }

    // Readout entries have unit variance in the analysis convention, i.e.
    // raw entries are scaled by 1/sqrt(d_J) so initial logits are O(1).
    const int d_last = net.specs.back().out_dim;
    Rng rng(seed, "net", "init-readout");
    net.readout.resize(n_classes, d_last);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_last));
    for (Eigen::Index r = 0; r < net.readout.rows(); ++r)
        for (Eigen::Index c = 0; c < net.readout.cols(); ++c)
            net.readout(r, c) = scale * (init == InitKind::Gaussian
                                             ? rng.normal()
                                             : rng.uniform(-u_bound, u_bound));
    net.norm_stats.resize(net.specs.size());
    return net;
}

namespace {

Matrix patch_reindex(const Matrix& values, int channels, int window, int stride) {
    const Eigen::Index n = values.rows();
    const int dim = static_cast<int>(values.cols());
    if (channels < 1 || dim % channels != 0)
        throw ParamError("patch prior: dimension not divisible by channel count");
    const int positions = dim / channels;
    if (window < 1 || window > positions)
        throw ParamError("patch prior: window larger than spatial extent");
    if (stride < 1) throw ParamError("patch prior: stride must be >= 1");
    const int out_positions = (positions - window) / stride + 1;
    const int out_dim = out_positions * window * channels;
    Matrix out(n, out_dim);
    for (int o = 0; o < out_positions; ++o) {
        const int start = o * stride;
        for (int w = 0; w < window; ++w) {
            out.middleCols(static_cast<Eigen::Index>((o * window + w) * channels), channels) =
                values.middleCols(static_cast<Eigen::Index>((start + w) * channels), channels);
        }
    }
    return out;
}

} // namespace

ActivationSet apply_patch_prior(const ActivationSet& activations, int channels, int window,
                                int stride) {
    ActivationSet out = activations;
    out.values = patch_reindex(activations.values, channels, window, stride);
    return out;
}

std::vector<ActivationSet> forward(const Network& net, const Matrix& inputs,
                                   const ForwardOptions& options) {
    net.validate();
    if (inputs.cols() != net.specs.front().in_dim)
        throw ShapeError("forward: input dim " + std::to_string(inputs.cols()) +
                         " does not match layer 1 (" +
                         std::to_string(net.specs.front().in_dim) + ")");
    if (net.standardize && !net.stats_frozen)
        throw ParamError("forward: standardization enabled but statistics not frozen");

    const int last = options.upto_layer.value_or(net.depth());
    if (last < 1 || last > net.depth()) throw ParamError("forward: upto_layer out of range");

    // Standardized networks propagate the raw chain (the frozen statistics
    // were computed on it; standardization absorbs any scale), and the
    // sqrt(d_j) division only applies to the emitted activations. Without
    // standardization the division is part of the recursion itself.
    std::vector<ActivationSet> acts;
    acts.reserve(static_cast<std::size_t>(last));
    Matrix h = inputs;
    for (int j = 1; j <= last; ++j) {
        const auto& spec = net.specs[static_cast<std::size_t>(j - 1)];
        Matrix pre = spec.prior
                         ? patch_reindex(h, spec.in_channels, spec.prior->window, spec.prior->stride)
                         : std::move(h);
        Matrix z = pre * net.weights[static_cast<std::size_t>(j - 1)].transpose();
        if (spec.nonlinearity == Nonlinearity::ReLU) z = z.cwiseMax(0.0);
        if (net.standardize) {
            const auto& st = net.norm_stats[static_cast<std::size_t>(j - 1)];
            Vector inv_std = (st.var.array() + kStandardizeEpsilon).sqrt().inverse();
            z = (z.rowwise() - st.mean.transpose()).array().rowwise() *
                inv_std.transpose().array();
        }
        const double scale = 1.0 / std::sqrt(static_cast<double>(spec.out_dim));
        if (net.standardize) {
            if (options.normalized)
                acts.push_back(ActivationSet{z * scale, j, options.split, true});
            else
                acts.push_back(ActivationSet{z, j, options.split, false});
        } else {
            if (options.normalized) z *= scale;
            acts.push_back(ActivationSet{z, j, options.split, options.normalized});
        }
        h = std::move(z);
    }
    return acts;
}

Matrix forward_logits(const Network& net, const Matrix& inputs) {
    ForwardOptions opts;
    opts.normalized = false;  // raw parameterization; the readout is stored raw
    auto acts = forward(net, inputs, opts);
    return acts.back().values * net.readout.transpose();
}

double accuracy(const Network& net, const Dataset& data, Split split) {
    Matrix x = data.inputs_for(split);
    IntVector y = data.labels_for(split);
    if (x.rows() == 0) return 0.0;
    Matrix logits = forward_logits(net, x);
    Eigen::Index correct = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index arg;
        logits.row(i).maxCoeff(&arg);
        if (arg == y(i)) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(logits.rows());
}

Matrix analysis_weight(const Network& net, int layer) {
    if (layer < 1 || layer > net.depth()) throw ParamError("analysis_weight: layer out of range");
    const Matrix& w = net.weights[static_cast<std::size_t>(layer - 1)];
    // The sqrt(d_{j-1}) fold undoes the scale absorbed by the previous
    // layer's standardization; without standardization the recursion already
    // carries the division and raw weights act on normalized activations.
    if (layer == 1 || !net.standardize) return w;
    const double factor = std::sqrt(static_cast<double>(net.specs[static_cast<std::size_t>(layer - 2)].out_dim));
    return w * factor;
}

Matrix analysis_readout(const Network& net) {
    if (net.standardize) {
        const double factor = std::sqrt(static_cast<double>(net.specs.back().out_dim));
        return net.readout * factor;
    }
    // without standardization the per-layer divisions compound down the chain
    double factor = 1.0;
    for (const auto& spec : net.specs) factor *= std::sqrt(static_cast<double>(spec.out_dim));
    return net.readout * factor;
}

void freeze_normalization(Network& net, const Matrix& train_inputs) {
    if (!net.standardize) return;
    if (train_inputs.cols() != net.specs.front().in_dim)
        throw ShapeError("freeze_normalization: input dim mismatch");
    net.norm_stats.assign(net.specs.size(), NormStats{});
    Matrix h = train_inputs;
    const double n = static_cast<double>(train_inputs.rows());
    for (std::size_t j = 0; j < net.specs.size(); ++j) {
        const auto& spec = net.specs[j];
        Matrix pre = spec.prior
                         ? patch_reindex(h, spec.in_channels, spec.prior->window, spec.prior->stride)
                         : std::move(h);
        Matrix z = pre * net.weights[j].transpose();
        if (spec.nonlinearity == Nonlinearity::ReLU) z = z.cwiseMax(0.0);
        Vector mean = z.colwise().mean();
        Vector var = (z.rowwise() - mean.transpose()).array().square().colwise().sum() / n;
        net.norm_stats[j] = NormStats{mean, var};
        Vector inv_std = (var.array() + kStandardizeEpsilon).sqrt().inverse();
        z = (z.rowwise() - mean.transpose()).array().rowwise() * inv_std.transpose().array();
        h = std::move(z);
    }
    net.stats_frozen = true;
}

namespace {

KeyValueConfig network_manifest(const Network& net) {
    KeyValueConfig m;
    m.set("format", "rainbow-network-v1");
    m.set_int("layers", net.depth());
    m.set("standardize", net.standardize ? "true" : "false");
    m.set("stats_frozen", net.stats_frozen ? "true" : "false");
    m.set_int("seed", static_cast<std::int64_t>(net.seed));
    m.set_int("classes", net.readout.rows());
    for (int j = 1; j <= net.depth(); ++j) {
        const auto& s = net.specs[static_cast<std::size_t>(j - 1)];
        const std::string sec = "layer" + std::to_string(j) + ".";
        m.set_int(sec + "in_dim", s.in_dim);
        m.set_int(sec + "out_dim", s.out_dim);
        m.set(sec + "nonlinearity", s.nonlinearity == Nonlinearity::ReLU ? "relu" : "identity");
        if (s.prior) {
            m.set(sec + "prior", "patch");
            m.set_int(sec + "prior_window", s.prior->window);
            m.set_int(sec + "prior_stride", s.prior->stride);
            m.set_int(sec + "in_channels", s.in_channels);
        } else {
            m.set(sec + "prior", "none");
        }
    }
    return m;
}

} // namespace

std::string network_hash(const Network& net) {
    std::string acc = network_manifest(net).canonical();
    for (const auto& w : net.weights) acc += matrix_hash(w);
    acc += matrix_hash(net.readout);
    if (net.stats_frozen)
        for (const auto& st : net.norm_stats) {
            acc += matrix_hash(st.mean.transpose());
            acc += matrix_hash(st.var.transpose());
        }
    KeyValueConfig h;
    h.set("acc", acc);
    return h.content_hash();
}

void save_network(const std::string& dir, const Network& net) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    for (int j = 1; j <= net.depth(); ++j)
        save_matrix(dir + "/W" + std::to_string(j) + ".bin",
                    net.weights[static_cast<std::size_t>(j - 1)]);
    save_matrix(dir + "/readout.bin", net.readout);
    if (net.stats_frozen) {
        for (int j = 1; j <= net.depth(); ++j) {
            save_vector(dir + "/norm_mean" + std::to_string(j) + ".bin",
                        net.norm_stats[static_cast<std::size_t>(j - 1)].mean);
            save_vector(dir + "/norm_var" + std::to_string(j) + ".bin",
                        net.norm_stats[static_cast<std::size_t>(j - 1)].var);
        }
    }
    network_manifest(net).save(dir + "/manifest.txt");
}

Network load_network(const std::string& dir) {
    KeyValueConfig m = KeyValueConfig::parse_file(dir + "/manifest.txt");
    if (m.get("format") != "rainbow-network-v1")
        throw FormatError("network: unknown format in " + dir);
    Network net;
    const int layers = static_cast<int>(m.get_int("layers"));
    net.standardize = m.get_bool_or("standardize", false);
    net.stats_frozen = m.get_bool_or("stats_frozen", false);
    net.seed = static_cast<std::uint64_t>(m.get_int("seed"));
    for (int j = 1; j <= layers; ++j) {
        const std::string sec = "layer" + std::to_string(j) + ".";
        LayerSpec s;
        s.in_dim = static_cast<int>(m.get_int(sec + "in_dim"));
        s.out_dim = static_cast<int>(m.get_int(sec + "out_dim"));
        s.nonlinearity = m.get(sec + "nonlinearity") == "relu" ? Nonlinearity::ReLU
                                                               : Nonlinearity::Identity;
        if (m.get(sec + "prior") == "patch") {
            s.prior = PatchPrior{static_cast<int>(m.get_int(sec + "prior_window")),
                                 static_cast<int>(m.get_int(sec + "prior_stride"))};
            s.in_channels = static_cast<int>(m.get_int(sec + "in_channels"));
        }
        net.specs.push_back(s);
        net.weights.push_back(load_matrix(dir + "/W" + std::to_string(j) + ".bin", s.out_dim,
                                          s.weight_in_dim()));
    }
    const int classes = static_cast<int>(m.get_int("classes"));
    net.readout = load_matrix(dir + "/readout.bin", classes, net.specs.back().out_dim);
    net.norm_stats.resize(static_cast<std::size_t>(layers));
    if (net.stats_frozen) {
        for (int j = 1; j <= layers; ++j) {
            auto& st = net.norm_stats[static_cast<std::size_t>(j - 1)];
            const int d = net.specs[static_cast<std::size_t>(j - 1)].out_dim;
            st.mean = load_vector(dir + "/norm_mean" + std::to_string(j) + ".bin", d);
            st.var = load_vector(dir + "/norm_var" + std::to_string(j) + ".bin", d);
        }
    }
    net.validate();
    return net;
}

} // namespace rainbow
