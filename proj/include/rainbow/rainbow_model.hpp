#pragma once

#include "rainbow/align.hpp"
#include "rainbow/dataset.hpp"
#include "rainbow/kernel.hpp"
#include "rainbow/net.hpp"
#include "rainbow/types.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace rainbow {

/// Generative model of a trained network: per-layer reference feature
/// activations (the infinite-width proxy, expressed in their own KPCA
/// basis), weight covariances C_j in the reference basis, and the readout
/// theta in the final reference basis.
struct RainbowModel {
    struct Layer {
        Matrix reference_activations;  // n_train x r_j, KPCA coordinates, analysis convention
        Vector reference_spectrum;     // eigenvalues of the reference activation covariance
        Matrix reference_basis;        // d_ref x r_j, KPCA basis in the reference net's coordinates
        Matrix covariance;             // C_j in the previous layer's reference basis
        int width = 0;                 // d_j of the reference network
    };
    std::vector<Layer> layers;  // layer j at index j-1; covariance of layer 1 lives in input space
    Matrix theta;               // n_classes x r_J
    int input_dim = 0;
    int n_classes = 0;
    KeyValueConfig provenance;  // source network hashes, truncation records

    int depth() const { return static_cast<int>(layers.size()); }
    void validate() const;
};

/// Empirical weight covariance d_j^{-1} W_j^T W_j (rows of W are neurons).
Matrix estimate_layer_covariance(const Matrix& weights);

/// Push a covariance into the reference basis: A C A^T, with A the
/// orthonormal-column alignment of the source activations to the reference.
Matrix align_covariance_to_reference(const Matrix& c_hat, const Matrix& a_hat_prev);

/// Arithmetic mean of covariances already mapped into one reference basis.
/// Averaging unaligned covariances is meaningless: each network's weights
/// live in a different basis.
Matrix average_covariances(const std::vector<Matrix>& aligned_covariances);

/// Convenience overload: maps each (C_hat, A_hat) pair into the reference
/// basis first, then averages.
Matrix average_covariances(const std::vector<std::pair<Matrix, Matrix>>& estimates);

struct WhitenedWeights {
    Matrix matrix;             // G_j, rows correspond one-to-one to neuron weights
    int effective_rank_used = 0;  // pseudo-inverse cutoff bookkeeping
};

/// G = W C^{-1/2} with the pseudo-inverse square root: eigenvalues below
/// cutoff * lambda_max are treated as zero.
WhitenedWeights whiten_weights(const Matrix& weights, const Matrix& covariance,
                               double cutoff = 1e-10);

struct MpReport {
    double gamma = 0.0;         // cols / rows
    double sigma2 = 0.0;        // entry variance (median-based when not given)
    double lambda_minus = 0.0;  // sigma^2 (1 - sqrt(gamma))^2
    double lambda_plus = 0.0;   // sigma^2 (1 + sqrt(gamma))^2
    double outlier_fraction = 0.0;
    int n_above = 0;
    int n_below = 0;
    double margin = 0.02;
    Vector eigenvalues;         // of (1/rows) G^T G, non-increasing
    Vector histogram_centers;   // 30 bins
    Vector histogram_density;   // empirical eigenvalue density per bin
    Vector mp_density;          // Marchenko-Pastur density at the bin centers
};

/// Compares the spectrum of (1/rows) G^T G against the Marchenko-Pastur law.
/// sigma^2 defaults to a median-based (MAD) estimate of the entry variance,
/// which is robust to planted spikes.
MpReport mp_spectrum_test(const Matrix& g, std::optional<double> sigma2 = std::nullopt,
                          double margin = 0.02);

struct MarginalReport {
    int rank = 0;
    Vector projections;    // <w_i, e_r> / sqrt(lambda_r) across neurons
    double ks_statistic = 0.0;  // against N(0,1)
    bool skipped = false;  // eigenvalue below cutoff
};

/// Per-rank standardized weight projections along covariance eigenvectors,
/// with a Kolmogorov-Smirnov statistic against the standard normal.
std::vector<MarginalReport> gaussianity_marginals(const Matrix& weights, const Matrix& eigvecs,
                                                  const Vector& eigvals,
                                                  const std::vector<int>& ranks,
                                                  double eigval_cutoff = 1e-12);

/// Critical value of the one-sample KS statistic at the given level
/// (asymptotic form K_alpha / sqrt(n)).
double ks_critical_value(Eigen::Index n, double level);

struct RankProjection {
    Matrix projected;          // W B_r B_r^T
    double variance_explained = 0.0;  // ||W B_r||^2 / ||W||^2
};

/// Projection of neuron weights onto the first r basis columns.
RankProjection project_weights_rank(const Matrix& weights, const Matrix& basis, int r);

struct RainbowModelOptions {
    double kpca_eigval_cutoff = 1e-12;  // relative to lambda_max; components below are dropped
};

/// Builds the model from a trained network: reference activations are the
/// network's own (train-split, analysis convention), covariances are the
/// empirical estimates mapped into the KPCA bases.
RainbowModel build_rainbow_model(const Network& net, const Dataset& data,
                                 const RainbowModelOptions& options = {});

enum class ClassifierMode { Realign, Retrain };

struct SampleMetrics {
    double test_accuracy = 0.0;
    std::vector<double> layer_alignment_errors;  // per layer, train split
};

struct SampledNetwork {
    Network network;
    SampleMetrics metrics;
};

/// Samples a finite-width Gaussian rainbow network: layer by layer, aligns
/// the current sampled activations to the reference, maps C_j into the
/// sampled coordinates, draws W_j = G_j C_hat_j^{1/2}, and refreshes the
/// standardization statistics on the train split before the next alignment.
/// The readout is the realigned theta or a retrained multinomial logistic
/// regression on the sampled features.
SampledNetwork sample_rainbow_network(const RainbowModel& model, const std::vector<int>& widths,
                                      const Dataset& data, std::uint64_t seed,
                                      ClassifierMode classifier = ClassifierMode::Realign);

void save_rainbow_model(const std::string& dir, const RainbowModel& model);
RainbowModel load_rainbow_model(const std::string& dir);

} // namespace rainbow
