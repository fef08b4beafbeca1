#pragma once

#include "rainbow/config.hpp"
#include "rainbow/dataset.hpp"
#include "rainbow/report.hpp"
#include "rainbow/train.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace rainbow {

/// Parsed experiment configuration. The recognized experiment names are
/// convergence, covariance, spectra, kpca-approx, gaussianity, resample,
/// dynamics, equivariance.
struct ExperimentConfig {
    std::string name;
    std::string output_dir;
    std::string cache_dir;  // trained networks are cached here, keyed by content hash

    // dataset
    std::string dataset_kind = "gaussian_mixture";
    int d0 = 32;
    int n_classes = 4;
    int n_per_class = 500;
    double separation = 3.0;
    std::uint64_t dataset_seed = 10;

    // architecture
    int depth = 3;
    int base_width = 32;
    std::vector<int> width_scales = {1, 2, 4, 8};

    // training
    TrainOptions train;

    // ensemble
    std::vector<std::uint64_t> seeds = {1, 2};

    // reference network (the infinite-width proxy): named explicitly
    std::uint64_t reference_seed = 0;  // 0 = first seeds entry
    int reference_scale = 0;           // 0 = widest listed scale (covariance: 2x widest)

    // experiment-specific knobs
    int samples_per_width = 3;     // resample: sampled networks averaged per width
    int ranks_analyzed = 32;       // dynamics: top ranks
    std::vector<int> marginal_ranks = {1, 2, 4, 8};  // gaussianity
    double mp_margin = 0.02;       // gaussianity: outlier margin on the MP edges
    int invariance_samples = 64;   // equivariance: random pairs
    int max_group_order = 512;     // equivariance: closure cap

    static ExperimentConfig parse(const KeyValueConfig& kv);
    KeyValueConfig echo() const;
    std::string content_hash() const;
    void validate() const;
};

struct Verdict {
    std::string name;
    bool pass = false;
    std::string details;
};

struct ExperimentResult {
    Report report;
    std::vector<Verdict> verdicts;
    bool cached = false;

    bool all_pass() const;
};

/// Runs the named experiment: trains the required ensemble (cache-aware),
/// runs the analysis pipeline, writes CSV tables and the manifest. Re-running
/// with an identical config reuses the completed report (idempotent).
ExperimentResult run_experiment(const ExperimentConfig& config);

/// Re-reads a report directory and prints pass/fail per bundled threshold.
/// Throws ReportError when the manifest or tables are missing or malformed.
std::vector<Verdict> report_summary(const std::string& report_dir, std::ostream& out);

/// The default desk-scale dataset for an experiment config.
Dataset make_dataset(const ExperimentConfig& config);

/// Builds the layer specs for a fully-connected ReLU stack of the configured
/// depth at width scale s.
std::vector<LayerSpec> make_arch(const ExperimentConfig& config, int scale);

/// Trains (or loads from cache) one network of the given width scale/seed.
TrainResult train_member(const ExperimentConfig& config, const Dataset& data, int scale,
                         std::uint64_t seed, bool want_trajectory = false);

} // namespace rainbow
