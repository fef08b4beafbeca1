#pragma once

#include "rainbow/config.hpp"
#include "rainbow/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace rainbow {

// Labeled dataset with a fixed train/test partition. Immutable after
// construction; generators are pure functions of their parameters and seed.
struct Dataset {
    Matrix inputs;             // n_samples x d0
    IntVector labels;          // values in [0, n_classes)
    std::vector<Split> split;  // per-sample tag
    int n_classes = 0;
    KeyValueConfig meta;       // name, seed, generator parameters

    Eigen::Index size() const { return inputs.rows(); }
    Eigen::Index dim() const { return inputs.cols(); }

    std::vector<Eigen::Index> indices(Split s) const;
    Matrix inputs_for(Split s) const;
    IntVector labels_for(Split s) const;

    /// Checks finiteness, label range and split integrity; throws DataError.
    void validate() const;
};

/// Class-conditional unit-covariance Gaussians with mean norms equal to
/// `separation`. Generates n_per_class samples per class for each split.
Dataset generate_gaussian_mixture(int d0, int n_classes, int n_per_class,
                                  double separation, std::uint64_t seed);

/// Binary labels from the sign of a frozen randomly initialized bias-free
/// ReLU network applied to Gaussian inputs. Half the samples go to each split.
Dataset generate_teacher_targets(int d0, int width, int depth, int n_samples,
                                 std::uint64_t seed);

struct IngestOptions {
    double test_fraction = 0.25;  // tail of the (shuffled) file becomes the test split
    std::uint64_t seed = 0;       // 0 = keep file order, no shuffle
};

/// CSV with a header row; the label column is named. Features are
/// standardized to zero mean / unit variance on the train split
/// (zero-variance features are centered only).
Dataset ingest_csv(const std::string& path, const std::string& label_column,
                   const IngestOptions& options = {});

/// IDX image/label file pair (big-endian magic-number format). Images are
/// flattened row-major; standardization as for CSV.
Dataset ingest_idx(const std::string& images_path, const std::string& labels_path,
                   const IngestOptions& options = {});

} // namespace rainbow
