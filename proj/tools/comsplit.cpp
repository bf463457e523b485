#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "comsplit/data.hpp"
#include "comsplit/experiment.hpp"
#include "comsplit/gradcheck.hpp"
#include "comsplit/version.hpp"

namespace {

int run_command(const std::string& scenario, const std::string& config_path,
                const std::vector<std::uint64_t>& seeds, const std::string& out_dir,
                const std::string& format, std::size_t threads) {
    nlohmann::json j = config_path.empty() ? nlohmann::json::object()
                                           : comsplit::load_config_json(config_path);
    // command-line flags override file keys
    j["scenario"] = scenario;
    if (!seeds.empty()) j["seeds"] = seeds;
    if (!out_dir.empty()) j["out_dir"] = out_dir;
    if (!format.empty()) j["format"] = format;
    if (threads != 0) j["threads"] = threads;

    const comsplit::ExperimentConfig cfg = comsplit::config_from_json(j);
    std::vector<comsplit::EarlyExitDecision> decisions;
    const auto rows = comsplit::run_scenario(cfg, &decisions);
    const auto table = comsplit::emit_results(rows, cfg.out_dir, cfg.format, cfg.scenario, cfg);
    comsplit::emit_dataset_manifest(cfg, comsplit::build_dataset(cfg));
    std::cout << "wrote " << rows.size() << " rows to " << table.string() << '\n';
    if (cfg.scenario == "early_exit") {
        const auto dec = comsplit::emit_decisions(decisions, cfg);
        std::cout << "wrote " << decisions.size() << " mode decisions to " << dec.string() << '\n';
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"comsplit: communication-aware split-learning experiment runner"};
    app.set_version_flag("--version", comsplit::kVersion);
    app.require_subcommand(1);

    // run
    auto* run = app.add_subcommand("run", "train and evaluate one scenario sweep");
    std::string scenario;
    run->add_option("scenario", scenario,
                    "one of: erasure, compression, awgn2, early_exit, heterogeneous")
        ->required();
    std::string config_path;
    run->add_option("--config", config_path, "JSON config file (flat keys)");
    std::vector<std::uint64_t> seeds;
    run->add_option("--seed", seeds, "override the seed list");
    std::string out_dir;
    run->add_option("--out", out_dir, "output directory");
    std::string format;
    run->add_option("--format", format, "csv or structured-text");
    std::size_t threads = 0;
    run->add_option("--threads", threads, "worker threads (0 = auto)");

    // list-scenarios
    auto* list = app.add_subcommand("list-scenarios", "enumerate available sweeps");

    // gradcheck
    auto* gradcheck = app.add_subcommand(
        "gradcheck", "finite-difference check of the split-model gradients");
    double tol = 1e-5;
    gradcheck->add_option("--tol", tol, "relative-error tolerance (default 1e-5)");

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic series CSV");
    std::string kind = "ar1";
    synth->add_option("--kind", kind, "ar1 or sine_noise");
    std::size_t length = 4000;
    synth->add_option("--length", length, "series length");
    std::uint64_t seed = 42;
    synth->add_option("--seed", seed, "generator seed");
    std::string out_file;
    synth->add_option("--out", out_file, "output CSV path")->required();
    double phi = 0.95, sigma = 0.05, x0 = 0.0;
    synth->add_option("--phi", phi, "ar1 coefficient");
    synth->add_option("--sigma", sigma, "ar1 innovation stddev");
    synth->add_option("--x0", x0, "ar1 initial value");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) {
            return run_command(scenario, config_path, seeds, out_dir, format, threads);
        }
        if (list->parsed()) {
            for (const auto& s : comsplit::list_scenarios()) {
                std::cout << s.name << "\n    " << s.description << "\n";
            }
            return 0;
        }
        if (gradcheck->parsed()) {
            const bool ok = comsplit::run_gradcheck_suite(std::cout, tol);
            return ok ? 0 : 1;
        }
        if (synth->parsed()) {
            const auto series =
                comsplit::synth_series(kind, length, comsplit::SynthParams{phi, sigma, x0}, seed);
            comsplit::write_series_csv(out_file, series);
            std::cout << "wrote " << series.size() << " values to " << out_file << '\n';
            return 0;
        }
    } catch (const std::exception& e) {
        nlohmann::json err;
        err["error"] = e.what();
        std::cerr << err.dump() << std::endl;
        return 1;
    }
    return 0;
}
