#include "rainbow/rainbow_model.hpp"

#include "rainbow/errors.hpp"
#include "rainbow/matrix_io.hpp"
#include "rainbow/rng.hpp"
#include "rainbow/train.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

namespace rainbow {

void RainbowModel::validate() const {
    if (layers.empty()) throw ParamError("rainbow model: no layers");
    for (std::size_t j = 0; j < layers.size(); ++j) {
        const auto& l = layers[j];
        const Eigen::Index expected =
            j == 0 ? input_dim : layers[j - 1].reference_activations.cols();
        if (l.covariance.rows() != expected || l.covariance.cols() != expected)
            throw ShapeError("rainbow model: covariance dims do not chain at layer " +
                             std::to_string(j + 1));
        const double scale = std::max(1.0, l.covariance.cwiseAbs().maxCoeff());
        if ((l.covariance - l.covariance.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
            throw NumericError("rainbow model: covariance not symmetric at layer " +
                               std::to_string(j + 1));
    }
    if (theta.cols() != layers.back().reference_activations.cols())
        throw ShapeError("rainbow model: theta dim does not match last reference rank");
}

Matrix estimate_layer_covariance(const Matrix& weights) {
    if (weights.rows() < 1) throw ParamError("estimate_layer_covariance: empty weight matrix");
    Matrix c = weights.transpose() * weights / static_cast<double>(weights.rows());
    return ((c + c.transpose()) / 2.0).eval();
}

namespace {

bool is_isometry(const Matrix& a, double tol) {
    if (a.rows() >= a.cols()) {
        Matrix g = a.transpose() * a;
        return (g - Matrix::Identity(a.cols(), a.cols())).cwiseAbs().maxCoeff() <= tol;
    }
    Matrix g = a * a.transpose();
    return (g - Matrix::Identity(a.rows(), a.rows())).cwiseAbs().maxCoeff() <= tol;
}

} // namespace

Matrix align_covariance_to_reference(const Matrix& c_hat, const Matrix& a_hat_prev) {
    if (a_hat_prev.cols() != c_hat.rows() || c_hat.rows() != c_hat.cols())
        throw ShapeError("align_covariance_to_reference: dim mismatch");
    if (!is_isometry(a_hat_prev, 1e-6))
        throw ParamError("align_covariance_to_reference: alignment is not an isometry");
    Matrix out = a_hat_prev * c_hat * a_hat_prev.transpose();
    return ((out + out.transpose()) / 2.0).eval();
}

Matrix average_covariances(const std::vector<Matrix>& aligned_covariances) {
    if (aligned_covariances.empty()) throw ParamError("average_covariances: empty list");
    const Eigen::Index d = aligned_covariances.front().rows();
    Matrix acc = Matrix::Zero(d, d);
    for (const Matrix& c : aligned_covariances) {
        if (c.rows() != d || c.cols() != d)
            throw ShapeError("average_covariances: inconsistent reference dims");
        acc += c;
    }
    return acc / static_cast<double>(aligned_covariances.size());
}

Matrix average_covariances(const std::vector<std::pair<Matrix, Matrix>>& estimates) {
    std::vector<Matrix> aligned;
    aligned.reserve(estimates.size());
    for (const auto& [c_hat, a_hat] : estimates)
        aligned.push_back(align_covariance_to_reference(c_hat, a_hat));
    return average_covariances(aligned);
}

WhitenedWeights whiten_weights(const Matrix& weights, const Matrix& covariance, double cutoff) {
    if (covariance.rows() != weights.cols() || covariance.rows() != covariance.cols())
        throw ShapeError("whiten_weights: covariance dim mismatch");
    Eigen::SelfAdjointEigenSolver<Matrix> es((covariance + covariance.transpose()) / 2.0);
    if (es.info() != Eigen::Success) throw NumericError("whiten_weights: eigendecomposition failed");
    const double lam_max = es.eigenvalues().maxCoeff();
    if (lam_max <= 0.0) throw NumericError("whiten_weights: covariance is zero (degenerate)");
    Vector inv_sqrt = Vector::Zero(es.eigenvalues().size());
    int rank = 0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
        if (es.eigenvalues()(i) > cutoff * lam_max) {
            inv_sqrt(i) = 1.0 / std::sqrt(es.eigenvalues()(i));
            ++rank;
        }
    }
    WhitenedWeights out;
    out.matrix = weights * es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose();
    out.effective_rank_used = rank;
    return out;
}

namespace {

double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    double hi = v[mid];
    if (v.size() % 2 == 1) return hi;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid - 1), v.end());
    return (hi + v[mid - 1]) / 2.0;
}

} // namespace

MpReport mp_spectrum_test(const Matrix& g, std::optional<double> sigma2, double margin) {
    const Eigen::Index rows = g.rows();
    const Eigen::Index cols = g.cols();
    if (rows < 2 || cols < 2) throw ShapeError("mp_spectrum_test: matrix too small");

    MpReport report;
    report.margin = margin;
    report.gamma = static_cast<double>(cols) / static_cast<double>(rows);

    if (sigma2) {
        report.sigma2 = *sigma2;
    } else {
        // MAD-based entry variance: robust to a planted low-rank spike.
        std::vector<double> entries(static_cast<std::size_t>(g.size()));
        Eigen::Map<Matrix>(entries.data(), rows, cols) = g;
        const double med = median_of(entries);
        for (double& e : entries) e = std::abs(e - med);
        const double mad = median_of(entries);
        const double sigma = mad / 0.6744897501960817;
        report.sigma2 = sigma * sigma;
    }

    const double root_gamma = std::sqrt(report.gamma);
    report.lambda_minus = report.sigma2 * (1.0 - root_gamma) * (1.0 - root_gamma);
    report.lambda_plus = report.sigma2 * (1.0 + root_gamma) * (1.0 + root_gamma);

    Matrix cov = g.transpose() * g / static_cast<double>(rows);
    Eigen::SelfAdjointEigenSolver<Matrix> es((cov + cov.transpose()) / 2.0, Eigen::EigenvaluesOnly);
    Vector eigs = es.eigenvalues().reverse();  // non-increasing
    report.eigenvalues = eigs;

    // With gamma > 1 the bottom cols - rows eigenvalues are structural zeros,
    // not outliers.
    const Eigen::Index informative = report.gamma > 1.0 ? rows : cols;
    const double lo = report.lambda_minus * (1.0 - margin);
    const double hi = report.lambda_plus * (1.0 + margin);
    for (Eigen::Index i = 0; i < informative; ++i) {
        if (eigs(i) > hi) ++report.n_above;
        else if (eigs(i) < lo) ++report.n_below;
    }
    report.outlier_fraction =
        static_cast<double>(report.n_above + report.n_below) / static_cast<double>(informative);

    // 30-bin histogram against the Marchenko-Pastur density.
    const int bins = 30;
    const double grid_lo = std::min(report.lambda_minus, eigs.minCoeff());
    const double grid_hi = std::max(report.lambda_plus, eigs.maxCoeff()) * 1.0001;
    const double width = (grid_hi - grid_lo) / bins;
    report.histogram_centers.resize(bins);
    report.histogram_density = Vector::Zero(bins);
    report.mp_density.resize(bins);
    for (int b = 0; b < bins; ++b) {
        const double center = grid_lo + (b + 0.5) * width;
        report.histogram_centers(b) = center;
        const double above = center - report.lambda_minus;
        const double below = report.lambda_plus - center;
        report.mp_density(b) =
            (above > 0 && below > 0 && center > 0)
                ? std::sqrt(above * below) / (2.0 * M_PI * report.sigma2 * report.gamma * center)
                : 0.0;
    }
    for (Eigen::Index i = 0; i < eigs.size(); ++i) {
        int b = static_cast<int>((eigs(i) - grid_lo) / width);
        b = std::min(std::max(b, 0), bins - 1);
        report.histogram_density(b) += 1.0;
    }
    report.histogram_density /= static_cast<double>(eigs.size()) * width;
    return report;
}

double ks_critical_value(Eigen::Index n, double level) {
    if (n < 1) throw ParamError("ks_critical_value: n must be >= 1");
    if (level <= 0.0 || level >= 1.0) throw ParamError("ks_critical_value: level in (0,1)");
    return std::sqrt(-0.5 * std::log(level / 2.0)) / std::sqrt(static_cast<double>(n));
}

namespace {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double ks_statistic_vs_normal(Vector samples) {
    std::sort(samples.data(), samples.data() + samples.size());
    const double n = static_cast<double>(samples.size());
    double d = 0.0;
    for (Eigen::Index i = 0; i < samples.size(); ++i) {
        const double f = normal_cdf(samples(i));
        d = std::max(d, std::abs(f - static_cast<double>(i) / n));
        d = std::max(d, std::abs(static_cast<double>(i + 1) / n - f));
    }
    return d;
}

} // namespace

std::vector<MarginalReport> gaussianity_marginals(const Matrix& weights, const Matrix& eigvecs,
                                                  const Vector& eigvals,
                                                  const std::vector<int>& ranks,
                                                  double eigval_cutoff) {
    if (eigvecs.rows() != weights.cols())
        throw ShapeError("gaussianity_marginals: eigenvector dim mismatch");
    if (eigvals.size() != eigvecs.cols())
        throw ShapeError("gaussianity_marginals: eigenvalue count mismatch");
    const double lam_max = eigvals.size() > 0 ? eigvals.maxCoeff() : 0.0;

    std::vector<MarginalReport> out;
    for (int r : ranks) {
        if (r < 1 || r > eigvals.size())
            throw ParamError("gaussianity_marginals: rank " + std::to_string(r) +
                             " outside spectrum");
        MarginalReport rep;
        rep.rank = r;
        const double lam = eigvals(r - 1);
        if (lam <= eigval_cutoff * std::max(lam_max, 1e-300)) {
            rep.skipped = true;
            out.push_back(std::move(rep));
            continue;
        }
        rep.projections = weights * eigvecs.col(r - 1) / std::sqrt(lam);
        rep.ks_statistic = ks_statistic_vs_normal(rep.projections);
        out.push_back(std::move(rep));
    }
    return out;
}

RankProjection project_weights_rank(const Matrix& weights, const Matrix& basis, int r) {
    if (r < 0 || r > basis.cols()) throw ParamError("project_weights_rank: r out of range");
    if (basis.rows() != weights.cols()) throw ShapeError("project_weights_rank: basis dim mismatch");
    RankProjection out;
    if (r == 0) {
        out.projected = Matrix::Zero(weights.rows(), weights.cols());
        out.variance_explained = 0.0;
        return out;
    }
    const auto block = basis.leftCols(r);
    Matrix coords = weights * block;
    out.projected = coords * block.transpose();
    const double total = weights.squaredNorm();
    out.variance_explained = total > 0.0 ? coords.squaredNorm() / total : 0.0;
    return out;
}

RainbowModel build_rainbow_model(const Network& net, const Dataset& data,
                                 const RainbowModelOptions& options) {
    net.validate();
    for (int j = 2; j <= net.depth(); ++j)
        if (net.specs[static_cast<std::size_t>(j - 1)].prior)
            throw ParamError("rainbow model: patch priors beyond layer 1 are not supported "
                             "(alignments act on the full activation space)");

    Matrix train_x = data.inputs_for(Split::Train);
    ForwardOptions fopts;
    fopts.normalized = true;
    fopts.split = Split::Train;
    auto acts = forward(net, train_x, fopts);

    RainbowModel model;
    model.input_dim = net.specs.front().in_dim;
    model.n_classes = static_cast<int>(net.readout.rows());

    for (int j = 1; j <= net.depth(); ++j) {
        auto k = kpca(acts[static_cast<std::size_t>(j - 1)]);
        const double lam_max = std::max(k.spectrum.maxCoeff(), 1e-300);
        Eigen::Index rank = 0;
        while (rank < k.spectrum.size() &&
               k.spectrum(rank) > options.kpca_eigval_cutoff * lam_max)
            ++rank;
        rank = std::max<Eigen::Index>(rank, 1);

        RainbowModel::Layer layer;
        layer.reference_basis = k.basis.leftCols(rank);
        layer.reference_spectrum = k.spectrum.head(rank);
        layer.reference_activations = k.projected.leftCols(rank);
        layer.width = net.specs[static_cast<std::size_t>(j - 1)].out_dim;

        // C_j in the previous layer's reference basis: layer 1 lives in the
        // input space; deeper layers conjugate the empirical estimate by the
        // KPCA basis (the alignment of a network to its own KPCA coordinates).
        Matrix w = analysis_weight(net, j);
        Matrix c_hat = estimate_layer_covariance(w);
        if (j == 1) {
            layer.covariance = c_hat;
        } else {
            const Matrix& basis_prev = model.layers[static_cast<std::size_t>(j - 2)].reference_basis;
            layer.covariance = align_covariance_to_reference(c_hat, basis_prev.transpose());
        }
        model.provenance.set_int("layer" + std::to_string(j) + ".kpca_rank", rank);
        model.layers.push_back(std::move(layer));
    }

    model.theta = analysis_readout(net) * model.layers.back().reference_basis;
    model.provenance.set("source_network", network_hash(net));
    model.provenance.set_int("n_train", static_cast<std::int64_t>(train_x.rows()));
    for (const auto& [key, value] : data.meta.entries())
        model.provenance.set("dataset_" + key, value);
    model.validate();
    return model;
}

SampledNetwork sample_rainbow_network(const RainbowModel& model, const std::vector<int>& widths,
                                      const Dataset& data, std::uint64_t seed,
                                      ClassifierMode classifier) {
    model.validate();
    const int depth = model.depth();
    if (static_cast<int>(widths.size()) != depth)
        throw ParamError("sample: widths list must have one entry per layer");
    for (int j = 1; j <= depth; ++j) {
        const Eigen::Index rank = model.layers[static_cast<std::size_t>(j - 1)].reference_activations.cols();
        if (widths[static_cast<std::size_t>(j - 1)] < 1)
            throw ParamError("sample: widths must be >= 1");
        if (widths[static_cast<std::size_t>(j - 1)] > rank)
            throw ParamError("sample: requested width " +
                             std::to_string(widths[static_cast<std::size_t>(j - 1)]) +
                             " exceeds reference rank " + std::to_string(rank) + " at layer " +
                             std::to_string(j));
    }
    Matrix train_x = data.inputs_for(Split::Train);
    if (train_x.cols() != model.input_dim)
        throw ShapeError("sample: dataset input dim does not match the model");
    if (train_x.rows() != model.layers.front().reference_activations.rows())
        throw ShapeError("sample: train split size does not match the model's reference set");

    SampledNetwork out;
    Network& net = out.network;
    net.standardize = true;
    net.seed = seed;
    for (int j = 1; j <= depth; ++j) {
        LayerSpec spec;
        spec.in_dim = j == 1 ? model.input_dim : widths[static_cast<std::size_t>(j - 2)];
        spec.out_dim = widths[static_cast<std::size_t>(j - 1)];
        spec.nonlinearity = Nonlinearity::ReLU;
        net.specs.push_back(spec);
    }
    net.norm_stats.resize(static_cast<std::size_t>(depth));

    Matrix h_raw = train_x;        // standardized activations, raw convention
    Matrix phi = train_x;          // analysis convention (h_raw / sqrt(d_j))
    Matrix rotation_last;          // final alignment for the readout
    const double n = static_cast<double>(train_x.rows());

    for (int j = 1; j <= depth; ++j) {
        const auto& layer = model.layers[static_cast<std::size_t>(j - 1)];
        const int d_out = widths[static_cast<std::size_t>(j - 1)];

        Matrix c_hat;
        if (j == 1) {
            c_hat = layer.covariance;
            out.metrics.layer_alignment_errors.push_back(0.0);
        } else {
            const auto& prev = model.layers[static_cast<std::size_t>(j - 2)];
            ActivationSet ref{prev.reference_activations, j - 1, Split::Train, true};
            ActivationSet hat{phi, j - 1, Split::Train, true};
            AlignmentResult align = procrustes_align(ref, hat);
            out.metrics.layer_alignment_errors.push_back(
                align.error / std::max(align.trace_ref, 1e-300));
            c_hat = align.rotation.transpose() * layer.covariance * align.rotation;
            c_hat = ((c_hat + c_hat.transpose()) / 2.0).eval();
        }

        Rng rng(seed, "rainbow", "sample-layer", static_cast<std::uint64_t>(j));
        Matrix g = rng.gaussian_matrix(d_out, c_hat.rows());
        Matrix w_conv = g * psd_sqrt(c_hat);
        const double raw_scale =
            j == 1 ? 1.0 : 1.0 / std::sqrt(static_cast<double>(widths[static_cast<std::size_t>(j - 2)]));
        net.weights.push_back(w_conv * raw_scale);
        if (!net.weights.back().allFinite())
            throw NumericError("sample: non-finite sampled weights at layer " + std::to_string(j));

        // standardization statistics on the train split, frozen before the
        // next alignment
        Matrix z = (h_raw * net.weights.back().transpose()).cwiseMax(0.0);
        Vector mean = z.colwise().mean();
        Vector var = (z.rowwise() - mean.transpose()).array().square().colwise().sum() / n;
        net.norm_stats[static_cast<std::size_t>(j - 1)] = NormStats{mean, var};
        Vector inv_std = (var.array() + kStandardizeEpsilon).sqrt().inverse();
        h_raw = (z.rowwise() - mean.transpose()).array().rowwise() * inv_std.transpose().array();
        phi = h_raw / std::sqrt(static_cast<double>(d_out));
        if (!phi.allFinite())
            throw NumericError("sample: non-finite activations at layer " + std::to_string(j));
    }
    net.stats_frozen = true;

    // Final alignment for the readout.
    {
        const auto& last = model.layers.back();
        ActivationSet ref{last.reference_activations, depth, Split::Train, true};
        ActivationSet hat{phi, depth, Split::Train, true};
        AlignmentResult align = procrustes_align(ref, hat);
        out.metrics.layer_alignment_errors.push_back(
            align.error / std::max(align.trace_ref, 1e-300));
        rotation_last = align.rotation;
    }

    const double inv_sqrt_last =
        1.0 / std::sqrt(static_cast<double>(widths[static_cast<std::size_t>(depth - 1)]));
    if (classifier == ClassifierMode::Realign) {
        net.readout = (model.theta * rotation_last) * inv_sqrt_last;
    } else {
        // ridge level matched to the weight decay the transferred readout was
        // trained with; near-zero l2 overfits the sampled features
        Matrix r = fit_logistic_readout(phi, data.labels_for(Split::Train), model.n_classes,
                                        2000, 1e-3);
        net.readout = r * inv_sqrt_last;
    }

    net.validate();
    out.metrics.test_accuracy = accuracy(net, data, Split::Test);
    return out;
}

void save_rainbow_model(const std::string& dir, const RainbowModel& model) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    KeyValueConfig m;
    m.set("format", "rainbow-model-v1");
    m.set_int("depth", model.depth());
    m.set_int("input_dim", model.input_dim);
    m.set_int("classes", model.n_classes);
    m.set_int("n_train", model.layers.front().reference_activations.rows());
    for (int j = 1; j <= model.depth(); ++j) {
        const auto& l = model.layers[static_cast<std::size_t>(j - 1)];
        const std::string sec = "layer" + std::to_string(j) + ".";
        m.set_int(sec + "rank", l.reference_activations.cols());
        m.set_int(sec + "width", l.width);
        m.set_int(sec + "cov_dim", l.covariance.rows());
        m.set_int(sec + "basis_rows", l.reference_basis.rows());
        const std::string tag = std::to_string(j);
        save_matrix(dir + "/C" + tag + ".bin", l.covariance);
        save_matrix(dir + "/ref_activations" + tag + ".bin", l.reference_activations);
        save_matrix(dir + "/ref_basis" + tag + ".bin", l.reference_basis);
        save_vector(dir + "/ref_spectrum" + tag + ".bin", l.reference_spectrum);
    }
    for (const auto& [key, value] : model.provenance.entries())
        m.set("provenance." + key, value);
    save_matrix(dir + "/theta.bin", model.theta);
    m.save(dir + "/manifest.txt");
}

RainbowModel load_rainbow_model(const std::string& dir) {
    KeyValueConfig m = KeyValueConfig::parse_file(dir + "/manifest.txt");
    if (m.get("format") != "rainbow-model-v1")
        throw FormatError("rainbow model: unknown format in " + dir);
    RainbowModel model;
    const int depth = static_cast<int>(m.get_int("depth"));
    model.input_dim = static_cast<int>(m.get_int("input_dim"));
    model.n_classes = static_cast<int>(m.get_int("classes"));
    const Eigen::Index n_train = m.get_int("n_train");
    for (int j = 1; j <= depth; ++j) {
        const std::string sec = "layer" + std::to_string(j) + ".";
        const std::string tag = std::to_string(j);
        RainbowModel::Layer l;
        const Eigen::Index rank = m.get_int(sec + "rank");
        const Eigen::Index cov_dim = m.get_int(sec + "cov_dim");
        const Eigen::Index basis_rows = m.get_int(sec + "basis_rows");
        l.width = static_cast<int>(m.get_int(sec + "width"));
        l.covariance = load_matrix(dir + "/C" + tag + ".bin", cov_dim, cov_dim);
        l.reference_activations = load_matrix(dir + "/ref_activations" + tag + ".bin", n_train, rank);
        l.reference_basis = load_matrix(dir + "/ref_basis" + tag + ".bin", basis_rows, rank);
        l.reference_spectrum = load_vector(dir + "/ref_spectrum" + tag + ".bin", rank);
        model.layers.push_back(std::move(l));
    }
    model.theta = load_matrix(dir + "/theta.bin", model.n_classes,
                              model.layers.back().reference_activations.cols());
    for (const auto& [key, value] : m.entries())
        if (key.rfind("provenance.", 0) == 0)
            model.provenance.set(key.substr(std::string("provenance.").size()), value);
    model.validate();
    return model;
}

} // namespace rainbow
