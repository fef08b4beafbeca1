#include "rainbow/experiments.hpp"

#include "rainbow/align.hpp"
#include "rainbow/dynamics.hpp"
#include "rainbow/equivariance.hpp"
#include "rainbow/kernel.hpp"
#include "rainbow/matrix_io.hpp"
#include "rainbow/rainbow_model.hpp"
#include "rainbow/rng.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <set>
#include <sstream>

namespace rainbow {

namespace fs = std::filesystem;

namespace {

const std::set<std::string> kExperimentNames = {
    "convergence", "covariance", "spectra", "kpca-approx",
    "gaussianity", "resample",   "dynamics", "equivariance"};

int count_inversions(const std::vector<double>& v) {
    int inversions = 0;
    for (std::size_t i = 0; i + 1 < v.size(); ++i)
        if (v[i + 1] >= v[i]) ++inversions;
    return inversions;
}

std::uint64_t reference_seed_of(const ExperimentConfig& cfg) {
    return cfg.reference_seed != 0 ? cfg.reference_seed : cfg.seeds.front();
}

int reference_scale_of(const ExperimentConfig& cfg, int fallback) {
    return cfg.reference_scale != 0 ? cfg.reference_scale : fallback;
}

std::string join_doubles(const std::vector<double>& v) {
    std::ostringstream out;
    for (std::size_t i = 0; i < v.size(); ++i) out << (i ? " " : "") << format_double(v[i]);
    return out.str();
}

} // namespace

ExperimentConfig ExperimentConfig::parse(const KeyValueConfig& kv) {
    ExperimentConfig c;
    c.name = kv.get("experiment");
    c.output_dir = kv.get("output_dir");
    c.cache_dir = kv.get_or("cache_dir", c.output_dir + "/cache");

    c.dataset_kind = kv.get_or("dataset.kind", c.dataset_kind);
    c.d0 = static_cast<int>(kv.get_int_or("dataset.d0", c.d0));
    c.n_classes = static_cast<int>(kv.get_int_or("dataset.n_classes", c.n_classes));
    c.n_per_class = static_cast<int>(kv.get_int_or("dataset.n_per_class", c.n_per_class));
    c.separation = kv.get_double_or("dataset.separation", c.separation);
    c.dataset_seed = static_cast<std::uint64_t>(kv.get_int_or("dataset.seed",
                                                              static_cast<std::int64_t>(c.dataset_seed)));

    c.depth = static_cast<int>(kv.get_int_or("architecture.depth", c.depth));
    c.base_width = static_cast<int>(kv.get_int_or("architecture.base_width", c.base_width));
    if (kv.has("architecture.width_scales")) {
        c.width_scales.clear();
        for (auto s : kv.get_int_list("architecture.width_scales"))
            c.width_scales.push_back(static_cast<int>(s));
    }

    c.train.epochs = static_cast<int>(kv.get_int_or("training.epochs", 30));
    c.train.lr.base = kv.get_double_or("training.lr", 0.1);
    c.train.lr.step_every = static_cast<int>(kv.get_int_or("training.lr_step_every", 20));
    c.train.lr.decay = kv.get_double_or("training.lr_decay", 0.1);
    c.train.momentum = kv.get_double_or("training.momentum", 0.9);
    c.train.weight_decay = kv.get_double_or("training.weight_decay", 1e-2);
    c.train.batch_size = static_cast<int>(kv.get_int_or("training.batch_size", 128));
    c.train.snapshot_every = static_cast<int>(kv.get_int_or("training.snapshot_every", 0));

    if (kv.has("seeds.list")) {
        c.seeds.clear();
        for (auto s : kv.get_int_list("seeds.list")) c.seeds.push_back(static_cast<std::uint64_t>(s));
    }

    c.reference_seed = static_cast<std::uint64_t>(kv.get_int_or("reference.seed", 0));
    c.reference_scale = static_cast<int>(kv.get_int_or("reference.scale", 0));

    c.samples_per_width = static_cast<int>(kv.get_int_or("resample.samples_per_width", 3));
    c.ranks_analyzed = static_cast<int>(kv.get_int_or("dynamics.ranks", 32));
    if (kv.has("gaussianity.ranks")) {
        c.marginal_ranks.clear();
        for (auto r : kv.get_int_list("gaussianity.ranks"))
            c.marginal_ranks.push_back(static_cast<int>(r));
    }
    c.mp_margin = kv.get_double_or("gaussianity.mp_margin", 0.02);
    c.invariance_samples = static_cast<int>(kv.get_int_or("equivariance.samples", 64));
    c.max_group_order = static_cast<int>(kv.get_int_or("equivariance.max_group_order", 512));
    c.validate();
    return c;
}

void ExperimentConfig::validate() const {
    if (!kExperimentNames.count(name))
        throw ConfigError("unknown experiment '" + name + "'");
    if (output_dir.empty()) throw ConfigError("output_dir must be set");
    if (width_scales.empty()) throw ConfigError("width_scales must be non-empty");
    for (int s : width_scales)
        if (s < 1) throw ConfigError("width scales must be positive");
    if (seeds.empty()) throw ConfigError("seeds list must be non-empty");
    std::set<std::uint64_t> distinct(seeds.begin(), seeds.end());
    if (distinct.size() != seeds.size()) throw ConfigError("seeds must be distinct");
    if (depth < 1) throw ConfigError("depth must be >= 1");
    if (base_width < 1) throw ConfigError("base_width must be >= 1");
}

KeyValueConfig ExperimentConfig::echo() const {
    KeyValueConfig e;
    e.set("experiment", name);
    e.set("dataset.kind", dataset_kind);
    e.set_int("dataset.d0", d0);
    e.set_int("dataset.n_classes", n_classes);
    e.set_int("dataset.n_per_class", n_per_class);
    e.set_double("dataset.separation", separation);
    e.set_int("dataset.seed", static_cast<std::int64_t>(dataset_seed));
    e.set_int("architecture.depth", depth);
    e.set_int("architecture.base_width", base_width);
    {
        std::ostringstream s;
        for (std::size_t i = 0; i < width_scales.size(); ++i)
            s << (i ? "," : "") << width_scales[i];
        e.set("architecture.width_scales", s.str());
    }
    e.set_int("training.epochs", train.epochs);
    e.set_double("training.lr", train.lr.base);
    e.set_int("training.lr_step_every", train.lr.step_every);
    e.set_double("training.lr_decay", train.lr.decay);
    e.set_double("training.momentum", train.momentum);
    e.set_double("training.weight_decay", train.weight_decay);
    e.set_int("training.batch_size", train.batch_size);
    e.set_int("training.snapshot_every", train.snapshot_every);
    {
        std::ostringstream s;
        for (std::size_t i = 0; i < seeds.size(); ++i) s << (i ? "," : "") << seeds[i];
        e.set("seeds.list", s.str());
    }
    e.set_int("reference.seed", static_cast<std::int64_t>(reference_seed));
    e.set_int("reference.scale", reference_scale);
    e.set_int("resample.samples_per_width", samples_per_width);
    e.set_int("dynamics.ranks", ranks_analyzed);
    {
        std::ostringstream s;
        for (std::size_t i = 0; i < marginal_ranks.size(); ++i)
            s << (i ? "," : "") << marginal_ranks[i];
        e.set("gaussianity.ranks", s.str());
    }
    e.set_double("gaussianity.mp_margin", mp_margin);
    e.set_int("equivariance.samples", invariance_samples);
    e.set_int("equivariance.max_group_order", max_group_order);
    return e;
}

std::string ExperimentConfig::content_hash() const { return echo().content_hash(kLibraryVersion); }

Dataset make_dataset(const ExperimentConfig& config) {
    if (config.dataset_kind == "gaussian_mixture")
        return generate_gaussian_mixture(config.d0, config.n_classes, config.n_per_class,
                                         config.separation, config.dataset_seed);
    if (config.dataset_kind == "teacher")
        return generate_teacher_targets(config.d0, config.base_width, config.depth,
                                        2 * config.n_classes * config.n_per_class,
                                        config.dataset_seed);
    throw ConfigError("unknown dataset kind '" + config.dataset_kind + "'");
}

std::vector<LayerSpec> make_arch(const ExperimentConfig& config, int scale) {
    std::vector<LayerSpec> specs;
    const int width = config.base_width * scale;
    for (int j = 1; j <= config.depth; ++j) {
        LayerSpec s;
        s.in_dim = j == 1 ? config.d0 : width;
        s.out_dim = width;
        s.nonlinearity = Nonlinearity::ReLU;
        specs.push_back(s);
    }
    return specs;
}

TrainResult train_member(const ExperimentConfig& config, const Dataset& data, int scale,
                         std::uint64_t seed, bool want_trajectory) {
    const std::uint64_t member_seed = derive_seed(seed, "cli", "member", static_cast<std::uint64_t>(scale));
    TrainOptions opts = config.train;
    opts.seed = member_seed;

    KeyValueConfig key;
    key.set("dataset", data.meta.canonical());
    key.set_int("scale", scale);
    key.set_int("depth", config.depth);
    key.set_int("base_width", config.base_width);
    key.set_int("seed", static_cast<std::int64_t>(member_seed));
    key.set_int("epochs", opts.epochs);
    key.set_double("lr", opts.lr.base);
    key.set_int("lr_step_every", opts.lr.step_every);
    key.set_double("lr_decay", opts.lr.decay);
    key.set_double("momentum", opts.momentum);
    key.set_double("weight_decay", opts.weight_decay);
    key.set_int("batch_size", opts.batch_size);
    key.set_int("snapshot_every", opts.snapshot_every);
    const std::string cache_key = key.content_hash(kLibraryVersion);
    const std::string cache_path = config.cache_dir + "/net-" + cache_key;

    if (!want_trajectory && fs::exists(cache_path + "/manifest.txt") &&
        fs::exists(cache_path + "/metrics.txt")) {
        TrainResult cached;
        cached.network = load_network(cache_path);
        KeyValueConfig metrics = KeyValueConfig::parse_file(cache_path + "/metrics.txt");
        cached.metrics.final_test_accuracy = metrics.get_double("final_test_accuracy");
        return cached;
    }

    Network net = init_network(make_arch(config, scale), config.n_classes, InitKind::Gaussian,
                               member_seed, /*standardize=*/true);
    TrainResult result = train_sgd(net, data, opts);

    fs::create_directories(config.cache_dir);
    save_network(cache_path, result.network);
    KeyValueConfig metrics;
    metrics.set_double("final_test_accuracy", result.metrics.final_test_accuracy);
    metrics.save(cache_path + "/metrics.txt");
    return result;
}

// ---------------------------------------------------------------------------
// Experiment implementations. Each fills CSV tables and verdicts.
// ---------------------------------------------------------------------------

namespace {

struct Runner {
    const ExperimentConfig& config;
    Report report;
    std::vector<Verdict> verdicts;

    explicit Runner(const ExperimentConfig& cfg) : config(cfg) { report.directory = cfg.output_dir; }

    void verdict(const std::string& name, bool pass, const std::string& details) {
        verdicts.push_back(Verdict{name, pass, details});
    }
};

struct ReferenceViews {
    // per layer: reference activations in KPCA coordinates, train and test
    std::vector<Matrix> train;
    std::vector<Matrix> test;
    std::vector<Matrix> basis;
    std::vector<Vector> spectrum;
};

ReferenceViews reference_views(const Network& ref_net, const Dataset& data) {
    ReferenceViews views;
    ForwardOptions opts;
    opts.normalized = true;
    auto train_acts = forward(ref_net, data.inputs_for(Split::Train), opts);
    opts.split = Split::Test;
    auto test_acts = forward(ref_net, data.inputs_for(Split::Test), opts);
    for (int j = 1; j <= ref_net.depth(); ++j) {
        auto k = kpca(train_acts[static_cast<std::size_t>(j - 1)]);
        views.train.push_back(k.projected);
        views.test.push_back(test_acts[static_cast<std::size_t>(j - 1)].values * k.basis);
        views.basis.push_back(k.basis);
        views.spectrum.push_back(k.spectrum);
    }
    return views;
}

void run_convergence(Runner& r, const Dataset& data) {
    const auto& cfg = r.config;
    const int widest = cfg.width_scales.back();

    // reference = the designated (default: first-seed, widest) network
    TrainResult ref = train_member(cfg, data, reference_scale_of(cfg, widest),
                                   reference_seed_of(cfg));
    ReferenceViews views = reference_views(ref.network, data);
    const std::string ref_hash = network_hash(ref.network);

    CsvTable table({"layer", "width_scale", "seed", "rel_error_test", "similarity_train"});
    // per layer, per scale: mean test error over the non-reference members
    std::vector<std::vector<double>> errors(static_cast<std::size_t>(cfg.depth));
    std::vector<std::vector<int>> counts(static_cast<std::size_t>(cfg.depth));
    for (auto& e : errors) e.assign(cfg.width_scales.size(), 0.0);
    for (auto& c : counts) c.assign(cfg.width_scales.size(), 0);

    for (std::size_t si = 0; si < cfg.width_scales.size(); ++si) {
        const int scale = cfg.width_scales[si];
        for (std::uint64_t seed : cfg.seeds) {
            TrainResult member = train_member(cfg, data, scale, seed);
            if (network_hash(member.network) == ref_hash) continue;
            ForwardOptions opts;
            opts.normalized = true;
            auto hat_train = forward(member.network, data.inputs_for(Split::Train), opts);
            opts.split = Split::Test;
            auto hat_test = forward(member.network, data.inputs_for(Split::Test), opts);
            for (int j = 1; j <= cfg.depth; ++j) {
                ActivationSet ref_train{views.train[static_cast<std::size_t>(j - 1)], j,
                                        Split::Train, true};
                ActivationSet ref_test{views.test[static_cast<std::size_t>(j - 1)], j, Split::Test,
                                       true};
                AlignmentResult align =
                    procrustes_align(ref_train, hat_train[static_cast<std::size_t>(j - 1)]);
                const double rel =
                    alignment_error_on_split(align, ref_test, hat_test[static_cast<std::size_t>(j - 1)]);
                const double sim =
                    similarity_score(ref_train, hat_train[static_cast<std::size_t>(j - 1)]);
                table.add_row({std::to_string(j), std::to_string(scale), std::to_string(seed),
                               format_double(rel), format_double(sim)});
                errors[static_cast<std::size_t>(j - 1)][si] += rel;
                counts[static_cast<std::size_t>(j - 1)][si] += 1;
            }
        }
    }
    table.save(r.report.directory + "/alignment.csv");

    for (int j = 1; j <= cfg.depth; ++j) {
        std::vector<double> mean_errors;
        for (std::size_t si = 0; si < cfg.width_scales.size(); ++si) {
            const int c = counts[static_cast<std::size_t>(j - 1)][si];
            if (c > 0) mean_errors.push_back(errors[static_cast<std::size_t>(j - 1)][si] / c);
        }
        const int inversions = count_inversions(mean_errors);
        r.verdict("layer" + std::to_string(j) + "_error_decreasing", inversions <= 1,
                  "errors " + join_doubles(mean_errors) + "; inversions " +
                      std::to_string(inversions));
    }
}

void run_covariance(Runner& r, const Dataset& data) {
    const auto& cfg = r.config;
    const int ref_scale = reference_scale_of(cfg, 2 * cfg.width_scales.back());

    TrainResult ref = train_member(cfg, data, ref_scale, reference_seed_of(cfg));
    ReferenceViews views = reference_views(ref.network, data);

    // Ensemble-averaged covariance of every layer in reference coordinates.
    auto ensemble_covariances = [&](int scale) {
        std::vector<std::vector<Matrix>> per_layer(static_cast<std::size_t>(cfg.depth));
        for (std::uint64_t seed : cfg.seeds) {
            TrainResult member = train_member(cfg, data, scale, seed);
            ForwardOptions opts;
            opts.normalized = true;
            auto acts = forward(member.network, data.inputs_for(Split::Train), opts);
            for (int j = 1; j <= cfg.depth; ++j) {
                Matrix c_hat = estimate_layer_covariance(analysis_weight(member.network, j));
                if (j == 1) {
                    per_layer[static_cast<std::size_t>(j - 1)].push_back(std::move(c_hat));
                } else {
                    ActivationSet ref_prev{views.train[static_cast<std::size_t>(j - 2)], j - 1,
                                           Split::Train, true};
                    AlignmentResult align =
                        procrustes_align(ref_prev, acts[static_cast<std::size_t>(j - 2)]);
                    per_layer[static_cast<std::size_t>(j - 1)].push_back(
                        align_covariance_to_reference(c_hat, align.rotation));
                }
            }
        }
        std::vector<Matrix> averaged;
        for (auto& list : per_layer) averaged.push_back(average_covariances(list));
        return averaged;
    };

    std::vector<Matrix> reference_cov = ensemble_covariances(ref_scale);
    auto op_norm = [](const Matrix& m) {
        Eigen::SelfAdjointEigenSolver<Matrix> es((m + m.transpose()) / 2.0, Eigen::EigenvaluesOnly);
        return es.eigenvalues().cwiseAbs().maxCoeff();
    };

    CsvTable table({"layer", "width_scale", "op_distance_rel"});
    std::vector<std::vector<double>> distances(static_cast<std::size_t>(cfg.depth));
    for (int scale : cfg.width_scales) {
        std::vector<Matrix> cov = ensemble_covariances(scale);
        for (int j = 1; j <= cfg.depth; ++j) {
            const Matrix& c_ref = reference_cov[static_cast<std::size_t>(j - 1)];
            Matrix diff = cov[static_cast<std::size_t>(j - 1)];
            // layer-1 covariances share the input space; deeper layers share
            // the reference coordinates (padded to the common size)
            if (diff.rows() != c_ref.rows()) {
                Matrix padded = Matrix::Zero(c_ref.rows(), c_ref.cols());
                padded.topLeftCorner(diff.rows(), diff.cols()) = diff;
                diff = padded;
            }
            const double dist = op_norm(diff - c_ref) / std::max(op_norm(c_ref), 1e-300);
            distances[static_cast<std::size_t>(j - 1)].push_back(dist);
            table.add_row({std::to_string(j), std::to_string(scale), format_double(dist)});
        }
    }
    table.save(r.report.directory + "/covariance_distance.csv");

    for (int j = 1; j <= cfg.depth; ++j) {
        const auto& d = distances[static_cast<std::size_t>(j - 1)];
        const int inversions = count_inversions(d);
        r.verdict("layer" + std::to_string(j) + "_covariance_converging", inversions <= 1,
                  "distances " + join_doubles(d) + "; inversions " + std::to_string(inversions));
    }
}

void run_spectra(Runner& r, const Dataset& data) {
    const auto& cfg = r.config;
    CsvTable act_table({"layer", "width_scale", "rank", "eigenvalue"});
    CsvTable weight_table({"layer", "width_scale", "rank", "eigenvalue"});
    CsvTable fit_table({"layer", "width_scale", "alpha", "fit_residual"});

    bool all_fits_ok = true;
    std::string fit_details;
    for (int scale : cfg.width_scales) {
        TrainResult member = train_member(cfg, data, scale, cfg.seeds.front());
        ForwardOptions opts;
        opts.normalized = true;
        auto acts = forward(member.network, data.inputs_for(Split::Train), opts);
        for (int j = 1; j <= cfg.depth; ++j) {
            auto k = kpca(acts[static_cast<std::size_t>(j - 1)]);
            for (Eigen::Index m = 0; m < k.spectrum.size(); ++m)
                act_table.add_row({std::to_string(j), std::to_string(scale), std::to_string(m + 1),
                                   format_double(k.spectrum(m))});
            try {
                SpectrumReport fit = powerlaw_fit(k.spectrum);
                fit_table.add_row({std::to_string(j), std::to_string(scale),
                                   format_double(fit.fitted_exponent),
                                   format_double(fit.fit_residual)});
                if (!(fit.fitted_exponent > 0.0)) {
                    all_fits_ok = false;
                    fit_details += "layer " + std::to_string(j) + " scale " + std::to_string(scale) +
                                   " alpha " + format_double(fit.fitted_exponent) + "; ";
                }
            } catch (const ParamError& e) {
                all_fits_ok = false;
                fit_details += std::string(e.what()) + "; ";
            }

            Matrix c_hat = estimate_layer_covariance(analysis_weight(member.network, j));
            Eigen::SelfAdjointEigenSolver<Matrix> es(c_hat, Eigen::EigenvaluesOnly);
            Vector eigs = es.eigenvalues().reverse();
            for (Eigen::Index m = 0; m < eigs.size(); ++m)
                weight_table.add_row({std::to_string(j), std::to_string(scale),
                                      std::to_string(m + 1), format_double(eigs(m))});
        }
    }
    act_table.save(r.report.directory + "/activation_spectra.csv");
    weight_table.save(r.report.directory + "/weight_spectra.csv");
    fit_table.save(r.report.directory + "/powerlaw.csv");
    r.verdict("activation_spectra_decay", all_fits_ok,
              all_fits_ok ? "all power-law fits have alpha > 0" : fit_details);
}

void run_kpca_approx(Runner& r, const Dataset& data) {
    const auto& cfg = r.config;
    const int scale = cfg.width_scales.back();

    TrainResult ref = train_member(cfg, data, reference_scale_of(cfg, scale),
                                   reference_seed_of(cfg));
    ReferenceViews views = reference_views(ref.network, data);

    CsvTable table({"layer", "basis", "rank", "variance_explained"});
    bool kpca_dominates = true;
    bool optimal_dominates = true;
    std::string details;

    for (int j = 2; j <= cfg.depth; ++j) {
        // Stack aligned weights of the whole ensemble (rows are neurons).
        std::vector<Matrix> aligned;
        for (std::uint64_t seed : cfg.seeds) {
            TrainResult member = train_member(cfg, data, scale, seed);
            ForwardOptions opts;
            opts.normalized = true;
            auto acts = forward(member.network, data.inputs_for(Split::Train), opts);
            ActivationSet ref_prev{views.train[static_cast<std::size_t>(j - 2)], j - 1, Split::Train,
                                   true};
            AlignmentResult align = procrustes_align(ref_prev, acts[static_cast<std::size_t>(j - 2)]);
            aligned.push_back(analysis_weight(member.network, j) * align.rotation.transpose());
        }
        Eigen::Index rows = 0;
        for (const auto& m : aligned) rows += m.rows();
        Matrix stacked(rows, aligned.front().cols());
        Eigen::Index at = 0;
        for (const auto& m : aligned) {
            stacked.middleRows(at, m.rows()) = m;
            at += m.rows();
        }

        // Three bases in the reference coordinates of layer j-1:
        // the weight-covariance eigenbasis (optimal), the KPCA coordinate
        // basis (identity: reference activations are already in KPCA order),
        // and a random orthogonal basis.
        const Eigen::Index dim = stacked.cols();
        Matrix c = estimate_layer_covariance(stacked);
        Eigen::SelfAdjointEigenSolver<Matrix> es(c);
        Matrix weight_basis = es.eigenvectors().rowwise().reverse();
        Matrix kpca_basis = Matrix::Identity(dim, dim);
        Rng rng(cfg.dataset_seed, "cli", "kpca-random-basis", static_cast<std::uint64_t>(j));
        Matrix random_basis = random_orthogonal(dim, rng);

        std::vector<int> grid;
        for (int rr = 1; rr < static_cast<int>(dim); rr *= 2) grid.push_back(rr);
        grid.push_back(static_cast<int>(dim));

        std::vector<double> kpca_curve, random_curve, optimal_curve;
        auto emit = [&](const char* name, const Matrix& basis, std::vector<double>& curve) {
            for (int rr : grid) {
                const double ratio = project_weights_rank(stacked, basis, rr).variance_explained;
                curve.push_back(ratio);
                table.add_row({std::to_string(j), name, std::to_string(rr), format_double(ratio)});
            }
        };
        emit("weight_pca", weight_basis, optimal_curve);
        emit("activation_kpca", kpca_basis, kpca_curve);
        emit("random", random_basis, random_curve);

        for (std::size_t i = 0; i < grid.size(); ++i) {
            if (kpca_curve[i] < random_curve[i] - 1e-9) {
                kpca_dominates = false;
                details += "layer " + std::to_string(j) + " rank " + std::to_string(grid[i]) +
                           ": kpca " + format_double(kpca_curve[i]) + " < random " +
                           format_double(random_curve[i]) + "; ";
            }
            if (optimal_curve[i] < kpca_curve[i] - 1e-9) optimal_dominates = false;
        }
    }
    table.save(r.report.directory + "/variance_explained.csv");
    r.verdict("kpca_beats_random", kpca_dominates,
              kpca_dominates ? "activation KPCA explains at least as much weight variance as a "
                               "random basis at every rank"
                             : details);
    r.verdict("weight_pca_optimal", optimal_dominates,
              "weight-covariance eigenbasis dominates the KPCA basis");
}

void run_gaussianity(Runner& r, const Dataset& data) {
    const auto& cfg = r.config;
    const int scale = cfg.width_scales.back();

    TrainResult ref = train_member(cfg, data, reference_scale_of(cfg, scale),
                                   reference_seed_of(cfg));
    ReferenceViews views = reference_views(ref.network, data);

    CsvTable ks_table({"layer", "rank", "ks_statistic", "ks_critical_1pct", "n_projections"});
    CsvTable mp_table(
        {"layer", "weights", "outlier_fraction", "lambda_minus", "lambda_plus", "sigma2"});
    bool outliers_ok = true;
    std::string details;

    for (int j = 2; j <= cfg.depth; ++j) {
        // Shared covariance in reference coordinates, then per-network
        // whitening with the covariance mapped back into each network's own
        // coordinates.
        std::vector<Matrix> aligned_cov;
        std::vector<Matrix> member_weights;
        std::vector<Matrix> member_rotations;
        for (std::uint64_t seed : cfg.seeds) {
            TrainResult member = train_member(cfg, data, scale, seed);
            ForwardOptions opts;
            opts.normalized = true;
            auto acts = forward(member.network, data.inputs_for(Split::Train), opts);
            ActivationSet ref_prev{views.train[static_cast<std::size_t>(j - 2)], j - 1, Split::Train,
                                   true};
            AlignmentResult align = procrustes_align(ref_prev, acts[static_cast<std::size_t>(j - 2)]);
            Matrix w = analysis_weight(member.network, j);
            aligned_cov.push_back(
                align_covariance_to_reference(estimate_layer_covariance(w), align.rotation));
            member_weights.push_back(std::move(w));
            member_rotations.push_back(align.rotation);
        }
        Matrix shared_cov = average_covariances(aligned_cov);

        Eigen::Index total_rows = 0;
        for (const auto& w : member_weights) total_rows += w.rows();
        Matrix stacked_white(total_rows, shared_cov.rows());
        Matrix stacked_aligned(total_rows, shared_cov.rows());
        Eigen::Index at = 0;
        for (std::size_t i = 0; i < member_weights.size(); ++i) {
            Matrix own_cov = member_rotations[i].transpose() * shared_cov * member_rotations[i];
            WhitenedWeights white = whiten_weights(member_weights[i], (own_cov + own_cov.transpose()) / 2.0);
            stacked_white.middleRows(at, member_weights[i].rows()) =
                white.matrix * member_rotations[i].transpose();
            stacked_aligned.middleRows(at, member_weights[i].rows()) =
                member_weights[i] * member_rotations[i].transpose();
            at += member_weights[i].rows();
        }

        Eigen::SelfAdjointEigenSolver<Matrix> es(shared_cov);
        Matrix eigvecs = es.eigenvectors().rowwise().reverse();
        Vector eigvals = es.eigenvalues().reverse();
        auto marginals = gaussianity_marginals(stacked_aligned, eigvecs, eigvals,
                                               cfg.marginal_ranks);
        for (const auto& m : marginals) {
            if (m.skipped) continue;
            ks_table.add_row({std::to_string(j), std::to_string(m.rank),
                              format_double(m.ks_statistic),
                              format_double(ks_critical_value(m.projections.size(), 0.01)),
                              std::to_string(m.projections.size())});
        }

        MpReport mp_white = mp_spectrum_test(stacked_white, std::nullopt, cfg.mp_margin);
        MpReport mp_trained = mp_spectrum_test(stacked_aligned, std::nullopt, cfg.mp_margin);
        mp_table.add_row({std::to_string(j), "whitened", format_double(mp_white.outlier_fraction),
                          format_double(mp_white.lambda_minus), format_double(mp_white.lambda_plus),
                          format_double(mp_white.sigma2)});
        mp_table.add_row({std::to_string(j), "trained", format_double(mp_trained.outlier_fraction),
                          format_double(mp_trained.lambda_minus),
                          format_double(mp_trained.lambda_plus), format_double(mp_trained.sigma2)});
        if (mp_white.outlier_fraction >= 0.10 ||
            mp_white.outlier_fraction > mp_trained.outlier_fraction + 1e-9) {
            outliers_ok = false;
            details += "layer " + std::to_string(j) + ": whitened " +
                       format_double(mp_white.outlier_fraction) + " vs trained " +
                       format_double(mp_trained.outlier_fraction) + "; ";
        }
    }
    ks_table.save(r.report.directory + "/ks.csv");
    mp_table.save(r.report.directory + "/mp.csv");
    r.verdict("whitening_removes_outliers", outliers_ok,
              outliers_ok ? "whitened outlier fraction < 10% and at most the trained fraction"
                          : details);
}

void run_resample(Runner& r, const Dataset& data) {
    const auto& cfg = r.config;
    CsvTable table({"width_scale", "trained_accuracy", "sampled_realign_accuracy",
                    "sampled_retrain_accuracy"});
    std::vector<double> gaps, realigns, retrains, trained_accs;

    for (int scale : cfg.width_scales) {
        TrainResult trained = train_member(cfg, data, scale, cfg.seeds.front());
        RainbowModel model = build_rainbow_model(trained.network, data);
        save_rainbow_model(r.report.directory + "/model-scale" + std::to_string(scale), model);
        // dead units leave zero-variance directions behind; the reference
        // rank can sit below the trained width, so clamp
        std::vector<int> widths;
        for (int j = 1; j <= trained.network.depth(); ++j)
            widths.push_back(std::min(
                trained.network.specs[static_cast<std::size_t>(j - 1)].out_dim,
                static_cast<int>(
                    model.layers[static_cast<std::size_t>(j - 1)].reference_activations.cols())));

        double realign_acc = 0.0, retrain_acc = 0.0;
        for (int k = 0; k < cfg.samples_per_width; ++k) {
            const std::uint64_t sample_seed =
                derive_seed(cfg.dataset_seed, "cli", "resample", static_cast<std::uint64_t>(scale * 1000 + k));
            realign_acc +=
                sample_rainbow_network(model, widths, data, sample_seed, ClassifierMode::Realign)
                    .metrics.test_accuracy;
            retrain_acc +=
                sample_rainbow_network(model, widths, data, sample_seed, ClassifierMode::Retrain)
                    .metrics.test_accuracy;
        }
        realign_acc /= cfg.samples_per_width;
        retrain_acc /= cfg.samples_per_width;

        table.add_row({std::to_string(scale), format_double(trained.metrics.final_test_accuracy),
                       format_double(realign_acc), format_double(retrain_acc)});
        trained_accs.push_back(trained.metrics.final_test_accuracy);
        realigns.push_back(realign_acc);
        retrains.push_back(retrain_acc);
        gaps.push_back(trained.metrics.final_test_accuracy - realign_acc);
    }
    table.save(r.report.directory + "/resample.csv");

    const double chance = 1.0 / cfg.n_classes;
    bool above_chance = true;
    for (double a : realigns) above_chance = above_chance && a > chance;
    r.verdict("sampled_above_chance", above_chance,
              "realign accuracies " + join_doubles(realigns) + " vs chance " +
                  format_double(chance));

    const int inversions = count_inversions(gaps);
    r.verdict("gap_shrinks_with_width", inversions <= 1,
              "gaps " + join_doubles(gaps) + "; inversions " + std::to_string(inversions));

    bool retrain_wins = true;
    for (std::size_t i = 0; i < realigns.size(); ++i)
        retrain_wins = retrain_wins && retrains[i] >= realigns[i];
    r.verdict("retrain_at_least_realign", retrain_wins,
              "retrain " + join_doubles(retrains) + " vs realign " + join_doubles(realigns));
}

void run_dynamics(Runner& r, const Dataset& data) {
    const auto& cfg = r.config;
    const int scale = cfg.width_scales.front();

    ExperimentConfig train_cfg = cfg;
    if (train_cfg.train.snapshot_every <= 0)
        train_cfg.train.snapshot_every = std::max(1, cfg.train.epochs / 8);
    TrainResult trained = train_member(train_cfg, data, scale, cfg.seeds.front(),
                                       /*want_trajectory=*/true);

    CsvTable residual_table({"layer", "epoch", "residual", "rank0_residual"});
    DynamicsReport full;
    bool all_better = true;
    std::string details;
    const int final_epoch = trained.trajectory.snapshots.back().epoch;

    for (int j = 1; j <= cfg.depth; ++j) {
        Matrix c_hat = estimate_layer_covariance(analysis_weight(trained.network, j));
        Eigen::SelfAdjointEigenSolver<Matrix> es(c_hat);
        Matrix basis = es.eigenvectors().rowwise().reverse();

        std::vector<int> ranks;
        for (int rank = 1; rank <= std::min<int>(cfg.ranks_analyzed, static_cast<int>(basis.cols()));
             ++rank)
            ranks.push_back(rank);
        DynamicsReport report = amplification_and_cosine(trained.trajectory, j, basis, ranks);
        for (const auto& snap : trained.trajectory.snapshots) {
            const double res =
                covariance_reconstruction_check(trained.trajectory, j, basis, snap.epoch);
            report.residuals.push_back({j, snap.epoch, res});
            const Matrix& w0 = trained.trajectory.snapshots.front().weights[static_cast<std::size_t>(j - 1)];
            const Matrix& wt = snap.weights[static_cast<std::size_t>(j - 1)];
            const double rank0 = wt.norm() > 0 ? (wt - w0).norm() / wt.norm() : 0.0;
            residual_table.add_row({std::to_string(j), std::to_string(snap.epoch),
                                    format_double(res), format_double(rank0)});
            if (snap.epoch == final_epoch && res >= rank0) {
                all_better = false;
                details += "layer " + std::to_string(j) + ": residual " + format_double(res) +
                           " >= rank0 " + format_double(rank0) + "; ";
            }
        }
        for (auto& row : report.rows) full.rows.push_back(row);
        for (auto& res : report.residuals) full.residuals.push_back(res);
    }
    save_dynamics_csv(r.report.directory + "/dynamics.csv", full);
    residual_table.save(r.report.directory + "/residuals.csv");
    r.verdict("amplification_explains_motion", all_better,
              all_better ? "reconstruction residual < rank-0 residual at the final epoch"
                         : details);
}

void run_equivariance(Runner& r, const Dataset&) {
    const auto& cfg = r.config;
    const int d0 = cfg.d0;

    FiniteGroup sign_flip = close_group({sign_flip_element(d0)}, cfg.max_group_order);
    FiniteGroup cyclic = close_group({cyclic_shift_element(d0)},
                                     std::max(cfg.max_group_order, 2 * d0));

    Rng rng(cfg.dataset_seed, "cli", "equivariance-cov");
    Matrix a = rng.gaussian_matrix(d0, d0);
    Matrix c = a * a.transpose() / static_cast<double>(d0);

    CsvTable table({"mode", "group", "width", "max_deviation"});
    bool analytic_ok = true;
    std::string analytic_details;
    bool finite_ok = true;
    std::string finite_details;

    for (const auto& [group, gname] :
         {std::pair<const FiniteGroup&, const char*>{sign_flip, "sign_flip"},
          std::pair<const FiniteGroup&, const char*>{cyclic, "cyclic_shift"}}) {
        Matrix c_sym = symmetrize_covariance(c, group);

        InvarianceReport analytic = test_kernel_invariance_analytic(
            c_sym, /*depth=*/2, group, cfg.invariance_samples, cfg.dataset_seed);
        table.add_row({"analytic", gname, "0", format_double(analytic.max_relative_deviation)});
        if (analytic.max_relative_deviation > 1e-10) {
            analytic_ok = false;
            analytic_details += std::string(gname) + " deviation " +
                                format_double(analytic.max_relative_deviation) + "; ";
        }

        // Finite-width random features with the symmetrized covariance.
        Matrix root = psd_sqrt(c_sym);
        std::vector<double> deviations;
        const int draws = 5;
        for (int width = 512; width <= 4096; width *= 2) {
            double mean_dev = 0.0;
            for (int k = 0; k < draws; ++k) {
                Rng wrng(cfg.dataset_seed, "cli", "equivariance-w",
                         static_cast<std::uint64_t>(width * 100 + k));
                Network net;
                LayerSpec spec;
                spec.in_dim = d0;
                spec.out_dim = width;
                spec.nonlinearity = Nonlinearity::ReLU;
                net.specs.push_back(spec);
                net.weights.push_back(wrng.gaussian_matrix(width, d0) * root);
                net.readout = Matrix::Zero(1, width);
                net.norm_stats.resize(1);
                InvarianceReport rep = test_kernel_invariance(
                    net, group, cfg.invariance_samples,
                    derive_seed(cfg.dataset_seed, "cli", "equivariance-x", static_cast<std::uint64_t>(k)));
                mean_dev += rep.max_relative_deviation;
            }
            mean_dev /= draws;
            deviations.push_back(mean_dev);
            table.add_row({"finite", gname, std::to_string(width), format_double(mean_dev)});
        }
        const int inversions = count_inversions(deviations);
        if (inversions > 1 || deviations.back() > 0.1) {
            finite_ok = false;
            finite_details += std::string(gname) + " deviations " + join_doubles(deviations) +
                              " inversions " + std::to_string(inversions) + "; ";
        }
    }
    table.save(r.report.directory + "/equivariance.csv");
    r.verdict("analytic_kernel_invariant", analytic_ok,
              analytic_ok ? "analytic rainbow kernel invariant to 1e-10" : analytic_details);
    r.verdict("finite_width_deviation_decreases", finite_ok,
              finite_ok ? "deviation decreases over 3 width doublings (<= 1 inversion) and is "
                          "<= 0.1 at the widest"
                        : finite_details);
}

} // namespace

ExperimentResult run_experiment(const ExperimentConfig& config) {
    config.validate();
    fs::create_directories(config.output_dir);
    const std::string hash = config.content_hash();

    // Idempotence: a completed run with the same content hash is reused.
    const std::string manifest_path = config.output_dir + "/manifest.txt";
    if (fs::exists(manifest_path)) {
        KeyValueConfig old = KeyValueConfig::parse_file(manifest_path);
        if (old.get_or("config_hash", "") == hash && old.get_bool_or("complete", false)) {
            ExperimentResult cached;
            cached.cached = true;
            cached.report.directory = config.output_dir;
            cached.report.manifest = old;
            const int n = static_cast<int>(old.get_int_or("verdicts", 0));
            for (int i = 0; i < n; ++i) {
                const std::string key = "verdict" + std::to_string(i) + ".";
                cached.verdicts.push_back(Verdict{old.get(key + "name"),
                                                  old.get_bool_or(key + "pass", false),
                                                  old.get_or(key + "details", "")});
            }
            return cached;
        }
    }

    const auto t0 = std::chrono::steady_clock::now();
    Dataset data = make_dataset(config);
    Runner runner(config);

    if (config.name == "convergence") run_convergence(runner, data);
    else if (config.name == "covariance") run_covariance(runner, data);
    else if (config.name == "spectra") run_spectra(runner, data);
    else if (config.name == "kpca-approx") run_kpca_approx(runner, data);
    else if (config.name == "gaussianity") run_gaussianity(runner, data);
    else if (config.name == "resample") run_resample(runner, data);
    else if (config.name == "dynamics") run_dynamics(runner, data);
    else if (config.name == "equivariance") run_equivariance(runner, data);
    else throw ConfigError("unknown experiment '" + config.name + "'");

    const auto t1 = std::chrono::steady_clock::now();
    const double seconds = std::chrono::duration<double>(t1 - t0).count();

    ExperimentResult result;
    result.report.directory = config.output_dir;
    KeyValueConfig& m = result.report.manifest;
    m.set("experiment", config.name);
    m.set("config_hash", hash);
    m.set("library_version", kLibraryVersion);
    m.set_double("wall_time_s", seconds);
    m.set("complete", "true");
    const KeyValueConfig echo = config.echo();
    for (const auto& [key, value] : echo.entries()) m.set("config." + key, value);
    result.verdicts = runner.verdicts;
    m.set_int("verdicts", static_cast<std::int64_t>(result.verdicts.size()));
    for (std::size_t i = 0; i < result.verdicts.size(); ++i) {
        const std::string key = "verdict" + std::to_string(i) + ".";
        m.set(key + "name", result.verdicts[i].name);
        m.set(key + "pass", result.verdicts[i].pass ? "true" : "false");
        m.set(key + "details", result.verdicts[i].details);
    }
    result.report.write_manifest();
    return result;
}

bool ExperimentResult::all_pass() const {
    for (const auto& v : verdicts)
        if (!v.pass) return false;
    return true;
}

std::vector<Verdict> report_summary(const std::string& report_dir, std::ostream& out) {
    KeyValueConfig manifest = Report::read_manifest(report_dir);
    const std::string name = manifest.get_or("experiment", "");
    if (name.empty()) throw ReportError("report: manifest has no experiment name");

    static const std::map<std::string, std::vector<std::string>> kTables = {
        {"convergence", {"alignment.csv"}},
        {"covariance", {"covariance_distance.csv"}},
        {"spectra", {"activation_spectra.csv", "weight_spectra.csv", "powerlaw.csv"}},
        {"kpca-approx", {"variance_explained.csv"}},
        {"gaussianity", {"ks.csv", "mp.csv"}},
        {"resample", {"resample.csv"}},
        {"dynamics", {"dynamics.csv", "residuals.csv"}},
        {"equivariance", {"equivariance.csv"}},
    };
    auto it = kTables.find(name);
    if (it == kTables.end()) throw ReportError("report: unknown experiment '" + name + "'");
    std::string missing;
    for (const auto& t : it->second)
        if (!fs::exists(report_dir + "/" + t)) missing += t + " ";
    if (!missing.empty()) throw ReportError("report: missing tables: " + missing);
    for (const auto& t : it->second) CsvTable::load(report_dir + "/" + t);  // schema check

    std::vector<Verdict> verdicts;
    const int n = static_cast<int>(manifest.get_int_or("verdicts", 0));
    out << "experiment " << name << " (" << report_dir << ")\n";
    for (int i = 0; i < n; ++i) {
        const std::string key = "verdict" + std::to_string(i) + ".";
        Verdict v{manifest.get(key + "name"), manifest.get_bool_or(key + "pass", false),
                  manifest.get_or(key + "details", "")};
        out << (v.pass ? "PASS" : "FAIL") << "  " << v.name << ": " << v.details << "\n";
        verdicts.push_back(std::move(v));
    }
    return verdicts;
}

} // namespace rainbow
