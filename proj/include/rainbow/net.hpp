#pragma once

#include "rainbow/dataset.hpp"
#include "rainbow/types.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace rainbow {

enum class Nonlinearity { ReLU, Identity };

/// Fixed patch-extraction operator applied before the learned matrix: the
/// input is read as (positions x channels), and windows of `window`
/// positions taken every `stride` are concatenated channel-wise.
struct PatchPrior {
    int window = 1;
    int stride = 1;
};

struct LayerSpec {
    int in_dim = 0;   // dimension of the incoming activation (before the prior)
    int out_dim = 0;  // number of neurons
    std::optional<PatchPrior> prior;
    Nonlinearity nonlinearity = Nonlinearity::ReLU;
    int in_channels = 1;  // channel count of the (positions x channels) layout, for the prior

    /// Input dimension of the weight matrix (after the prior operator).
    int weight_in_dim() const;
    void validate() const;
};

/// Per-unit post-activation statistics of the standardization layer.
struct NormStats {
    Vector mean;
    Vector var;  // strictly positive once frozen (an epsilon floor is added)
};

inline constexpr double kStandardizeEpsilon = 1e-5;

/// Per-sample activations at one layer. `values` rows follow the dataset
/// split they were computed from. `normalized` marks activations in the
/// analysis convention where rho divides by sqrt(d_j).
struct ActivationSet {
    Matrix values;  // n_samples x d_j
    int layer_index = 0;
    Split split = Split::Train;
    bool normalized = false;
};

/// Bias-free feed-forward network. Weight matrices are stored in the raw
/// training parameterization; the analysis convention (division by
/// sqrt(d_j) inside rho) is applied by `forward` and by
/// `analysis_weight`, which folds the sqrt(d_j) factor of the previous
/// layer into the weights.
struct Network {
    std::vector<LayerSpec> specs;
    std::vector<Matrix> weights;     // W_j: out_dim x weight_in_dim
    std::vector<NormStats> norm_stats;
    Matrix readout;                  // n_classes x d_J
    bool standardize = false;        // standardization layers enabled
    bool stats_frozen = false;       // norm_stats hold train-set statistics
    std::uint64_t seed = 0;

    int depth() const { return static_cast<int>(specs.size()); }
    void validate() const;
};

enum class InitKind { Gaussian, UniformKaiming };

/// Entries i.i.d. with unit variance per coordinate: N(0,1) or
/// uniform on [-sqrt(3), sqrt(3)]. The width normalization lives in rho,
/// not in the init scale. The readout is zero-initialized.
Network init_network(std::vector<LayerSpec> specs, int n_classes, InitKind init,
                     std::uint64_t seed, bool standardize = false);

struct ForwardOptions {
    // Analysis convention: rho applies the nonlinearity, standardizes when
    // enabled, then divides by sqrt(d_j).
    bool normalized = true;
    std::optional<int> upto_layer;  // 1-based; stop after this layer
    Split split = Split::Train;
};

/// Activations after each rho. Never mutates the network; requires frozen
/// stats when standardization is enabled.
std::vector<ActivationSet> forward(const Network& net, const Matrix& inputs,
                                   const ForwardOptions& options = {});

/// Logits of the readout applied to the last activation layer.
Matrix forward_logits(const Network& net, const Matrix& inputs);

/// Classification accuracy of argmax(logits) against labels.
double accuracy(const Network& net, const Dataset& data, Split split);

/// Pure reindexing: (positions x channels) -> (out_positions x window*channels).
ActivationSet apply_patch_prior(const ActivationSet& activations, int channels,
                                int window, int stride);

/// Weight matrix of layer j (1-based) in the analysis convention: for j >= 2
/// the sqrt(d_{j-1}) factor of the previous layer's rho is folded in, so the
/// matrix acts on normalized activations. Layer 1 acts on raw inputs.
Matrix analysis_weight(const Network& net, int layer);

/// Readout in the analysis convention (folds sqrt(d_J)).
Matrix analysis_readout(const Network& net);

/// Recomputes standardization statistics layer-by-layer on the given inputs
/// and freezes them into the network.
void freeze_normalization(Network& net, const Matrix& train_inputs);

/// Hash of a network's weights and manifest, for provenance records.
std::string network_hash(const Network& net);

void save_network(const std::string& dir, const Network& net);
Network load_network(const std::string& dir);

} // namespace rainbow
