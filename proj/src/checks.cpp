#include "rainbow/checks.hpp"

#include "rainbow/align.hpp"
#include "rainbow/dynamics.hpp"
#include "rainbow/equivariance.hpp"
#include "rainbow/experiments.hpp"
#include "rainbow/kernel.hpp"
#include "rainbow/rainbow_model.hpp"
#include "rainbow/rng.hpp"
#include "rainbow/train.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <ostream>
#include <sstream>

namespace rainbow {

namespace {

struct Checker {
    std::string scratch;
    std::ostream& log;
    std::vector<CheckResult> results;

    void run(const std::string& name, bool fast,
             const std::function<std::pair<bool, std::string>()>& body) {
        const auto t0 = std::chrono::steady_clock::now();
        CheckResult r;
        r.name = name;
        r.fast = fast;
        try {
            auto [pass, details] = body();
            r.pass = pass;
            r.details = details;
        } catch (const std::exception& e) {
            r.pass = false;
            r.details = std::string("exception: ") + e.what();
        }
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log << (r.pass ? "PASS" : "FAIL") << "  " << r.name << "  (" << r.seconds << " s)  "
            << r.details << "\n";
        results.push_back(std::move(r));
    }
};

std::pair<bool, std::string> experiment_outcome(const ExperimentResult& result) {
    std::string details;
    bool pass = true;
    for (const auto& v : result.verdicts) {
        if (!v.pass) {
            pass = false;
            details += v.name + " [" + v.details + "] ";
        }
    }
    if (pass) details = std::to_string(result.verdicts.size()) + " verdicts pass";
    return {pass, details};
}

ExperimentConfig pinned_config(const std::string& name, const std::string& scratch) {
    KeyValueConfig kv;
    kv.set("experiment", name);
    kv.set("output_dir", scratch + "/" + name);
    kv.set("cache_dir", scratch + "/cache");
    return ExperimentConfig::parse(kv);
}

// 1. Procrustes optimality and the closed-form error identity.
std::pair<bool, std::string> check_procrustes_optimality() {
    Rng rng(7, "accept", "procrustes");
    int identity_failures = 0;
    int optimality_failures = 0;
    double worst_identity = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int d = 2 + static_cast<int>(rng.uniform_int(63));
        const int n = d + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(512 - d)));
        const double scale_ref = std::exp(rng.uniform(-1.0, 1.0));
        const double scale_hat = std::exp(rng.uniform(-1.0, 1.0));
        ActivationSet ref{rng.gaussian_matrix(n, d) * scale_ref, 1, Split::Train, true};
        ActivationSet hat{rng.gaussian_matrix(n, d) * scale_hat, 1, Split::Train, true};
        AlignmentResult align = procrustes_align(ref, hat);

        const double scale = align.trace_hat + align.trace_ref;
        const double identity_gap = std::abs(align.error_direct - align.error) / scale;
        worst_identity = std::max(worst_identity, identity_gap);
        if (identity_gap > 1e-8) ++identity_failures;

        // Competitor error via the expanded quadratic:
        // E||A hat - ref||^2 = trace_hat + trace_ref - 2 tr(A cross^T).
        Matrix cross = cross_covariance(ref, hat);
        for (int k = 0; k < 100; ++k) {
            Matrix competitor = random_orthonormal_columns(d, d, rng);
            const double err = scale - 2.0 * (competitor.array() * cross.array()).sum();
            if (align.error > err + 1e-12) {
                ++optimality_failures;
                break;
            }
        }
    }
    std::ostringstream details;
    details << "worst identity gap " << worst_identity << ", identity failures "
            << identity_failures << ", optimality failures " << optimality_failures;
    return {identity_failures == 0 && optimality_failures == 0, details.str()};
}

// 2. Alignment error equals the Bures-Wasserstein distance of the Grams.
std::pair<bool, std::string> check_alignment_bw_identity() {
    Rng rng(11, "accept", "align-bw");
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 4 + static_cast<int>(rng.uniform_int(61));
        const int d = 2 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n - 1)));
        ActivationSet ref{rng.gaussian_matrix(n, d), 1, Split::Train, true};
        ActivationSet hat{rng.gaussian_matrix(n, d), 1, Split::Train, true};
        const double err = procrustes_align(ref, hat).error;
        const double bw = bures_wasserstein(empirical_gram(hat), empirical_gram(ref));
        worst = std::max(worst, std::abs(err - bw) / std::max(bw, 1e-12));
    }
    return {worst <= 1e-6, "worst relative gap " + format_double(worst)};
}

// 3. Entropic bound dominates the Bures-Wasserstein distance.
std::pair<bool, std::string> check_entropic_dominance() {
    Rng rng(13, "accept", "entropic");
    int violations = 0;
    double tightest = 1e300;
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 4 + static_cast<int>(rng.uniform_int(29));
        Matrix a = rng.gaussian_matrix(n, n);
        Matrix b = rng.gaussian_matrix(n, n);
        GramOperator t_hat = gram_from_kernel(a * a.transpose(), "analytic");
        GramOperator t_ref = gram_from_kernel(b * b.transpose(), "analytic");
        const double bw = bures_wasserstein(t_hat, t_ref);
        for (int k = 0; k < 9; ++k) {
            const double lambda = std::pow(10.0, -3.0 + k * 0.5);
            const double bound = entropic_bw_bound(t_hat, t_ref, lambda);
            tightest = std::min(tightest, bound - bw);
            if (bound < bw) ++violations;
        }
    }
    return {violations == 0,
            "violations " + std::to_string(violations) + ", smallest slack " +
                format_double(tightest)};
}

// 4. Spectral tail bound for exact power-law sequences.
std::pair<bool, std::string> check_tail_bound() {
    int failures = 0;
    std::string details;
    for (double alpha : {1.5, 2.0, 3.0}) {
        for (double c : {0.5, 1.0, 2.0}) {
            Vector eigs(5000);
            for (Eigen::Index m = 0; m < eigs.size(); ++m)
                eigs(m) = c * std::pow(static_cast<double>(m + 1), -alpha);
            for (int k = 0; k < 9; ++k) {
                const double lambda = std::pow(10.0, -3.0 + k * 0.5);
                TailBoundCheck check = spectral_tail_bound_check(eigs, alpha, c, lambda);
                if (!check.premise_ok || !check.holds) {
                    ++failures;
                    details += "alpha=" + format_double(alpha) + " c=" + format_double(c) +
                               " lambda=" + format_double(lambda) + " lhs=" +
                               format_double(check.lhs) + " rhs=" + format_double(check.rhs) + "; ";
                }
            }
        }
    }
    return {failures == 0, failures == 0 ? "81 grid points hold" : details};
}

// 5. Kernel mean-square convergence rate in the width.
std::pair<bool, std::string> check_kernel_rate() {
    const int d0 = 32;
    const int n = 200;
    Rng rng(17, "accept", "kernel-rate");
    Matrix x = rng.gaussian_matrix(n, d0);
    GramOperator analytic =
        gram_from_kernel(gaussian_rainbow_kernel_matrix(x, Matrix::Identity(d0, d0), 1),
                         "analytic");

    std::vector<double> log_width, log_mse;
    for (int d1 = 16; d1 <= 4096; d1 *= 2) {
        double mse = 0.0;
        for (int draw = 0; draw < 20; ++draw) {
            Rng wrng(17, "accept", "kernel-rate-draw",
                     static_cast<std::uint64_t>(d1 * 100 + draw));
            Matrix w = wrng.gaussian_matrix(d1, d0);
            Matrix phi = (x * w.transpose()).cwiseMax(0.0) / std::sqrt(static_cast<double>(d1));
            ActivationSet acts{phi, 1, Split::Train, true};
            mse += kernel_mse(empirical_gram(acts), analytic);
        }
        mse /= 20.0;
        log_width.push_back(std::log(static_cast<double>(d1)));
        log_mse.push_back(std::log(mse));
    }
    // least-squares slope
    const double k = static_cast<double>(log_width.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < log_width.size(); ++i) {
        sx += log_width[i];
        sy += log_mse[i];
        sxx += log_width[i] * log_width[i];
        sxy += log_width[i] * log_mse[i];
    }
    const double slope = (sxy / k - sx / k * sy / k) / (sxx / k - sx / k * sx / k);
    return {std::abs(slope + 1.0) <= 0.15, "log-log slope " + format_double(slope)};
}

// 8. Marchenko-Pastur calibration and spike detection.
std::pair<bool, std::string> check_mp_calibration() {
    int fraction_failures = 0;
    int spike_failures = 0;
    double worst_fraction = 0.0;
    for (int seed = 0; seed < 10; ++seed) {
        Rng rng(23, "accept", "mp", static_cast<std::uint64_t>(seed));
        Matrix g = rng.gaussian_matrix(2000, 500);
        MpReport clean = mp_spectrum_test(g);
        worst_fraction = std::max(worst_fraction, clean.outlier_fraction);
        if (clean.outlier_fraction > 0.02) ++fraction_failures;

        // rank-1 spike: row covariance I + beta v v^T with beta = 10 sqrt(gamma)
        const double beta = 10.0 * std::sqrt(clean.gamma);
        Vector v = rng.gaussian_vector(500).normalized();
        Matrix spiked = g + (std::sqrt(1.0 + beta) - 1.0) * (g * v) * v.transpose();
        MpReport planted = mp_spectrum_test(spiked);
        if (planted.n_above != 1) ++spike_failures;
    }
    std::ostringstream details;
    details << "worst clean outlier fraction " << worst_fraction << ", fraction failures "
            << fraction_failures << ", spike failures " << spike_failures;
    return {fraction_failures == 0 && spike_failures == 0, details.str()};
}

// 10 (synthetic part). Pure amplification trajectories recovered exactly.
std::pair<bool, std::string> check_dynamics_exactness() {
    Rng rng(29, "accept", "dynamics");
    const int d = 24;
    const int neurons = 40;
    Matrix basis = random_orthogonal(d, rng);
    Matrix w0 = rng.gaussian_matrix(neurons, d);

    TrainTrajectory traj;
    traj.snapshots.push_back({0, {w0}, Matrix::Zero(1, 1)});
    std::vector<Vector> schedules;
    for (int t = 1; t <= 5; ++t) {
        Vector a(d);
        for (int r = 0; r < d; ++r) a(r) = std::exp(rng.uniform(-0.5, 2.0));
        schedules.push_back(a);
        Matrix wt = w0 * basis * a.asDiagonal() * basis.transpose();
        traj.snapshots.push_back({t, {wt}, Matrix::Zero(1, 1)});
    }

    std::vector<int> ranks;
    for (int r = 1; r <= d; ++r) ranks.push_back(r);
    DynamicsReport report = amplification_and_cosine(traj, 1, basis, ranks);
    double worst_a = 0.0, worst_c = 0.0;
    for (const auto& row : report.rows) {
        if (row.epoch == 0) {
            if (row.amplification != 1.0 || row.cosine != 1.0)
                return {false, "t=0 row not exactly (1,1)"};
            continue;
        }
        const double expected = schedules[static_cast<std::size_t>(row.epoch - 1)](row.rank - 1);
        worst_a = std::max(worst_a, std::abs(row.amplification - expected) / expected);
        worst_c = std::max(worst_c, std::abs(row.cosine - 1.0));
    }
    double worst_res = 0.0;
    for (int t = 1; t <= 5; ++t)
        worst_res = std::max(worst_res, covariance_reconstruction_check(traj, 1, basis, t));
    std::ostringstream details;
    details << "worst amplification error " << worst_a << ", worst |cosine-1| " << worst_c
            << ", worst residual " << worst_res;
    return {worst_a <= 1e-10 && worst_c <= 1e-12 && worst_res <= 1e-10, details.str()};
}

// 12. Gradient correctness and training determinism.
std::pair<bool, std::string> check_trainer(const std::string& scratch) {
    Dataset data = generate_gaussian_mixture(8, 3, 40, 2.0, 3);
    Matrix x = data.inputs_for(Split::Train).topRows(32);
    IntVector y = data.labels_for(Split::Train).head(32);

    std::vector<LayerSpec> specs(2);
    specs[0] = LayerSpec{8, 12, std::nullopt, Nonlinearity::ReLU, 1};
    specs[1] = LayerSpec{12, 10, std::nullopt, Nonlinearity::ReLU, 1};
    Network plain = init_network(specs, 3, InitKind::Gaussian, 5, /*standardize=*/false);
    Network standardized = init_network(specs, 3, InitKind::Gaussian, 6, /*standardize=*/true);
    const double err_plain = gradient_check(plain, x, y, 1e-5, 120, 9);
    const double err_std = gradient_check(standardized, x, y, 1e-5, 120, 9);

    TrainOptions opts;
    opts.epochs = 5;
    opts.lr.base = 0.05;
    opts.batch_size = 32;
    opts.seed = 77;
    Network init = init_network(specs, 3, InitKind::Gaussian, 7, /*standardize=*/true);
    TrainResult a = train_sgd(init, data, opts);
    TrainResult b = train_sgd(init, data, opts);
    const std::string dir_a = scratch + "/determinism-a";
    const std::string dir_b = scratch + "/determinism-b";
    save_network(dir_a, a.network);
    save_network(dir_b, b.network);
    const bool deterministic = network_hash(a.network) == network_hash(b.network);

    std::ostringstream details;
    details << "gradient error plain " << err_plain << ", standardized " << err_std
            << ", determinism " << (deterministic ? "byte-exact" : "BROKEN");
    return {err_plain <= 1e-4 && err_std <= 1e-4 && deterministic, details.str()};
}

} // namespace

std::vector<CheckResult> run_acceptance_checks(const std::string& scratch_dir, bool fast_only,
                                               std::ostream& log) {
    Checker checker{scratch_dir, log, {}};

    checker.run("1_procrustes_optimality_and_error_identity", true, check_procrustes_optimality);
    checker.run("2_alignment_error_equals_bw", true, check_alignment_bw_identity);
    checker.run("3_entropic_bound_dominates_bw", true, check_entropic_dominance);
    checker.run("4_spectral_tail_bound", true, check_tail_bound);
    checker.run("8_mp_calibration_and_spike", true, check_mp_calibration);
    checker.run("10a_dynamics_synthetic_exactness", true, check_dynamics_exactness);
    checker.run("12_trainer_gradients_and_determinism", true,
                [&] { return check_trainer(scratch_dir); });

    if (!fast_only) {
        checker.run("5_random_feature_kernel_rate", false, check_kernel_rate);
        checker.run("6_activation_convergence_trend", false, [&] {
            ExperimentConfig cfg = pinned_config("convergence", scratch_dir);
            return experiment_outcome(run_experiment(cfg));
        });
        checker.run("7_covariance_convergence_trend", false, [&] {
            KeyValueConfig kv;
            kv.set("experiment", "covariance");
            kv.set("output_dir", scratch_dir + "/covariance");
            kv.set("cache_dir", scratch_dir + "/cache");
            kv.set("architecture.width_scales", "1,2,4");
            kv.set("reference.scale", "8");
            kv.set("seeds.list", "1,2,3,4,5");
            kv.set("training.weight_decay", "0");
            return experiment_outcome(run_experiment(ExperimentConfig::parse(kv)));
        });
        checker.run("9_resample_trend", false, [&] {
            KeyValueConfig kv;
            kv.set("experiment", "resample");
            kv.set("output_dir", scratch_dir + "/resample");
            kv.set("cache_dir", scratch_dir + "/cache");
            kv.set("architecture.width_scales", "1,2,4");
            kv.set("seeds.list", "1");
            kv.set("resample.samples_per_width", "3");
            return experiment_outcome(run_experiment(ExperimentConfig::parse(kv)));
        });
        checker.run("10b_dynamics_real_run", false, [&] {
            KeyValueConfig kv;
            kv.set("experiment", "dynamics");
            kv.set("output_dir", scratch_dir + "/dynamics");
            kv.set("cache_dir", scratch_dir + "/cache");
            kv.set("architecture.width_scales", "2");
            kv.set("seeds.list", "1");
            kv.set("training.weight_decay", "0");
            kv.set("training.snapshot_every", "4");
            return experiment_outcome(run_experiment(ExperimentConfig::parse(kv)));
        });
        checker.run("11_equivariance", false, [&] {
            ExperimentConfig cfg = pinned_config("equivariance", scratch_dir);
            return experiment_outcome(run_experiment(cfg));
        });
    }
    return checker.results;
}

} // namespace rainbow
