// rainbow-lab: experiment harness for the rainbow network library.
//
//   rainbow-lab run <config-path>            run a named experiment
//   rainbow-lab summarize <report-dir>       pass/fail summary of a report
//   rainbow-lab sample <model-dir> [...]     sample a Gaussian rainbow network
//   rainbow-lab check [--full] [--out DIR]   run the invariant/property suite
//
// Exit codes: 0 success, 2 config error, 3 numeric error, 4 acceptance failure.

#include "rainbow/checks.hpp"
#include "rainbow/dataset.hpp"
#include "rainbow/errors.hpp"
#include "rainbow/experiments.hpp"
#include "rainbow/rainbow_model.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitAcceptance = 4;

int run_command(const std::string& config_path) {
    rainbow::ExperimentConfig config =
        rainbow::ExperimentConfig::parse(rainbow::KeyValueConfig::parse_file(config_path));
    rainbow::ExperimentResult result = rainbow::run_experiment(config);
    std::cout << "experiment " << config.name << (result.cached ? " (cached)" : "") << " -> "
              << result.report.directory << "\n";
    for (const auto& v : result.verdicts)
        std::cout << (v.pass ? "PASS" : "FAIL") << "  " << v.name << ": " << v.details << "\n";
    return result.all_pass() ? kExitOk : kExitAcceptance;
}

int summarize_command(const std::string& dir) {
    auto verdicts = rainbow::report_summary(dir, std::cout);
    for (const auto& v : verdicts)
        if (!v.pass) return kExitAcceptance;
    return kExitOk;
}

int sample_command(const std::string& model_dir, const std::vector<int>& widths,
                   std::uint64_t seed, const std::string& classifier,
                   const std::string& out_dir) {
    rainbow::RainbowModel model = rainbow::load_rainbow_model(model_dir);

    // The sampling protocol aligns against the model's stored reference
    // activations, so the dataset must be the one recorded in provenance.
    const rainbow::KeyValueConfig& prov = model.provenance;
    const std::string dataset_name = prov.get_or("dataset_name", "");
    rainbow::Dataset data = [&] {
        if (dataset_name == "gaussian_mixture")
            return rainbow::generate_gaussian_mixture(
                static_cast<int>(prov.get_int("dataset_d0")),
                static_cast<int>(prov.get_int("dataset_n_classes")),
                static_cast<int>(prov.get_int("dataset_n_per_class")),
                prov.get_double("dataset_separation"),
                static_cast<std::uint64_t>(prov.get_int("dataset_seed")));
        if (dataset_name == "teacher_targets")
            return rainbow::generate_teacher_targets(
                static_cast<int>(prov.get_int("dataset_d0")),
                static_cast<int>(prov.get_int("dataset_width")),
                static_cast<int>(prov.get_int("dataset_depth")),
                static_cast<int>(prov.get_int("dataset_n_samples")),
                static_cast<std::uint64_t>(prov.get_int("dataset_seed")));
        throw rainbow::ConfigError("sample: model provenance dataset '" + dataset_name +
                                   "' cannot be regenerated");
    }();

    std::vector<int> use_widths = widths;
    if (use_widths.empty())
        for (const auto& layer : model.layers) use_widths.push_back(layer.width);

    const auto mode = classifier == "retrain" ? rainbow::ClassifierMode::Retrain
                                              : rainbow::ClassifierMode::Realign;
    rainbow::SampledNetwork sampled =
        rainbow::sample_rainbow_network(model, use_widths, data, seed, mode);
    std::cout << "sampled network test accuracy " << sampled.metrics.test_accuracy << "\n";
    // entry k is the alignment at activation level k (level 0 is the input,
    // level J feeds the readout)
    for (std::size_t j = 1; j < sampled.metrics.layer_alignment_errors.size(); ++j)
        std::cout << "level " << j << " relative alignment error "
                  << sampled.metrics.layer_alignment_errors[j] << "\n";
    if (!out_dir.empty()) {
        rainbow::save_network(out_dir, sampled.network);
        std::cout << "saved to " << out_dir << "\n";
    }
    return kExitOk;
}

int check_command(bool full, const std::string& out_dir) {
    auto results = rainbow::run_acceptance_checks(out_dir, !full, std::cout);
    int failures = 0;
    for (const auto& r : results)
        if (!r.pass) ++failures;
    std::cout << results.size() - failures << "/" << results.size() << " checks pass\n";
    return failures == 0 ? kExitOk : kExitAcceptance;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"rainbow-lab: desk-scale experiments on the rainbow model of trained networks"};
    app.require_subcommand(1);

    std::string config_path;
    auto* run = app.add_subcommand("run", "run an experiment from a config file");
    run->add_option("config", config_path, "config file (key = value sections)")->required();

    std::string report_dir;
    auto* summarize = app.add_subcommand("summarize", "summarize a report directory");
    summarize->add_option("dir", report_dir, "report directory")->required();

    std::string model_dir, classifier = "realign", sample_out;
    std::vector<int> widths;
    std::uint64_t seed = 0;
    auto* sample = app.add_subcommand("sample", "sample a Gaussian rainbow network from a model");
    sample->add_option("model", model_dir, "rainbow model directory")->required();
    sample->add_option("--widths", widths, "layer widths (default: the model's widths)");
    sample->add_option("--seed", seed, "sampling seed");
    sample->add_option("--classifier", classifier, "realign | retrain")
        ->check(CLI::IsMember({"realign", "retrain"}));
    sample->add_option("--out", sample_out, "directory to save the sampled network");

    bool full = false;
    std::string check_out = "check-out";
    auto* check = app.add_subcommand("check", "run the invariant/property suite");
    check->add_flag("--full", full, "include the experiment-backed trend checks");
    check->add_option("--out", check_out, "scratch directory for reports and caches");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) return run_command(config_path);
        if (*summarize) return summarize_command(report_dir);
        if (*sample) return sample_command(model_dir, widths, seed, classifier, sample_out);
        if (*check) return check_command(full, check_out);
    } catch (const rainbow::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const rainbow::ParamError& e) {
        std::cerr << "parameter error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const rainbow::FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const rainbow::ReportError& e) {
        std::cerr << "report error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const rainbow::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return kExitNumeric;
    }
    return kExitOk;
}
