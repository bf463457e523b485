#pragma once

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "comsplit/data.hpp"
#include "comsplit/optim.hpp"
#include "comsplit/split_model.hpp"
#include "comsplit/version.hpp"

namespace comsplit {

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
    std::string scenario = "erasure";  // erasure|compression|awgn2|early_exit|heterogeneous

    // dataset
    std::string dataset_kind = "synth";  // synth|csv
    std::string dataset_path;
    std::string dataset_column = "Close";
    std::string dataset_delimiter = ",";
    std::string synth_kind = "ar1";
    std::size_t synth_length = 4000;
    std::uint64_t synth_seed = 42;
    SynthParams synth_params{};

    // architecture
    std::size_t window = 30;     // N
    std::size_t repr_size = 10;  // M = H
    std::size_t edge_layers = 1;
    std::size_t server_layers = 3;
    std::vector<std::size_t> het_edge_layers{1, 2};

    // training
    TrainConfig training{};
    double train_p = 0.1;  // fixed p_tr for compression / early-exit runs
    std::vector<double> ptr_grid;
    std::vector<double> lambda_grid{0.1, 0.5, 0.9};
    std::vector<double> train_snr1_grid{-5.0, 0.0, 5.0, 10.0};
    bool include_vanilla = true;
    double snr2_offset_db = -5.0;
    std::size_t m1 = 5;
    std::size_t m2 = 5;
    std::vector<std::size_t> m1_grid{3, 5, 7};
    double m1_sweep_snr1 = -5.0;

    // evaluation
    std::vector<double> p_grid{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    std::vector<double> eval_snr1_grid{-10, -8, -6, -4, -2, 0, 2, 4, 6, 8, 10};
    std::vector<std::size_t> m_grid{4, 7, 10};
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::size_t repeats = 10;
    double ee_threshold = 0.0;

    // splits
    std::array<double, 3> fractions{0.6, 0.1, 0.3};

    // output
    std::string out_dir = "results";
    std::string format = "csv";  // csv|structured-text
    bool denormalized = false;
    bool record_walltime = false;
    bool save_checkpoints = false;
    std::size_t threads = 0;  // 0 = hardware concurrency

    std::string canonical_json;  // effective config, for hashing/manifests
};

namespace detail {

inline std::string fmt_full(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string fmt_setting(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

template <typename T>
inline void config_fail(const std::string& key, const T& value, const std::string& allowed) {
    std::ostringstream os;
    os << "config: key '" << key << "' = " << value << " invalid; allowed: " << allowed;
    throw ContractError(os.str());
}

}  // namespace detail

inline nlohmann::json load_config_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("config: cannot open " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("config: " + path + ": " + e.what());
    }
    if (!j.is_object()) throw ParseError("config: " + path + " must hold a JSON object");
    return j;
}

// Flat-key JSON config. Unknown keys are rejected; every value is range
// checked; scenario-dependent defaults are filled for keys left unset.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig cfg;
    bool ptr_grid_set = false;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "scenario") cfg.scenario = value.get<std::string>();
            else if (key == "dataset_kind") cfg.dataset_kind = value.get<std::string>();
            else if (key == "dataset_path") cfg.dataset_path = value.get<std::string>();
            else if (key == "dataset_column") cfg.dataset_column = value.get<std::string>();
            else if (key == "dataset_delimiter") cfg.dataset_delimiter = value.get<std::string>();
            else if (key == "synth_kind") cfg.synth_kind = value.get<std::string>();
            else if (key == "synth_length") cfg.synth_length = value.get<std::size_t>();
            else if (key == "synth_seed") cfg.synth_seed = value.get<std::uint64_t>();
            else if (key == "synth_phi") cfg.synth_params.phi = value.get<double>();
            else if (key == "synth_sigma") cfg.synth_params.sigma = value.get<double>();
            else if (key == "synth_x0") cfg.synth_params.x0 = value.get<double>();
            else if (key == "window") cfg.window = value.get<std::size_t>();
            else if (key == "repr_size") cfg.repr_size = value.get<std::size_t>();
            else if (key == "edge_layers") cfg.edge_layers = value.get<std::size_t>();
            else if (key == "server_layers") cfg.server_layers = value.get<std::size_t>();
            else if (key == "het_edge_layers") cfg.het_edge_layers = value.get<std::vector<std::size_t>>();
            else if (key == "batch_size") cfg.training.batch_size = value.get<std::size_t>();
            else if (key == "max_epochs") cfg.training.max_epochs = value.get<std::size_t>();
            else if (key == "patience") cfg.training.patience = value.get<std::size_t>();
            else if (key == "adam_alpha") cfg.training.adam.alpha = value.get<double>();
            else if (key == "adam_beta1") cfg.training.adam.beta1 = value.get<double>();
            else if (key == "adam_beta2") cfg.training.adam.beta2 = value.get<double>();
            else if (key == "adam_eps") cfg.training.adam.eps = value.get<double>();
            else if (key == "val_repeats") cfg.training.val_repeats = value.get<std::size_t>();
            else if (key == "clip_gradients") cfg.training.clip_gradients = value.get<bool>();
            else if (key == "clip_norm") cfg.training.clip_norm = value.get<double>();
            else if (key == "divergence_threshold") cfg.training.divergence_threshold = value.get<double>();
            else if (key == "lambda") cfg.training.lambda = value.get<double>();
            else if (key == "lambda_grid") cfg.lambda_grid = value.get<std::vector<double>>();
            else if (key == "train_p") cfg.train_p = value.get<double>();
            else if (key == "ptr_grid") { cfg.ptr_grid = value.get<std::vector<double>>(); ptr_grid_set = true; }
            else if (key == "train_snr1_grid") cfg.train_snr1_grid = value.get<std::vector<double>>();
            else if (key == "include_vanilla") cfg.include_vanilla = value.get<bool>();
            else if (key == "snr2_offset_db") cfg.snr2_offset_db = value.get<double>();
            else if (key == "m1") cfg.m1 = value.get<std::size_t>();
            else if (key == "m2") cfg.m2 = value.get<std::size_t>();
            else if (key == "m1_grid") cfg.m1_grid = value.get<std::vector<std::size_t>>();
            else if (key == "m1_sweep_snr1") cfg.m1_sweep_snr1 = value.get<double>();
            else if (key == "p_grid") cfg.p_grid = value.get<std::vector<double>>();
            else if (key == "eval_snr1_grid") cfg.eval_snr1_grid = value.get<std::vector<double>>();
            else if (key == "m_grid") cfg.m_grid = value.get<std::vector<std::size_t>>();
            else if (key == "seeds") cfg.seeds = value.get<std::vector<std::uint64_t>>();
            else if (key == "repeats") cfg.repeats = value.get<std::size_t>();
            else if (key == "ee_threshold") cfg.ee_threshold = value.get<double>();
            else if (key == "split_train") cfg.fractions[0] = value.get<double>();
            else if (key == "split_val") cfg.fractions[1] = value.get<double>();
            else if (key == "split_test") cfg.fractions[2] = value.get<double>();
            else if (key == "out_dir") cfg.out_dir = value.get<std::string>();
            else if (key == "format") cfg.format = value.get<std::string>();
            else if (key == "denormalized") cfg.denormalized = value.get<bool>();
            else if (key == "record_walltime") cfg.record_walltime = value.get<bool>();
            else if (key == "save_checkpoints") cfg.save_checkpoints = value.get<bool>();
            else if (key == "threads") cfg.threads = value.get<std::size_t>();
            else throw ContractError("config: unknown key '" + key + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("config: ") + e.what());
    }

    // scenario-dependent defaults
    if (!ptr_grid_set) {
        if (cfg.scenario == "heterogeneous") cfg.ptr_grid = {0.0, 0.1, 0.5};
        else cfg.ptr_grid = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
    }

    // validation
    static const std::vector<std::string> kScenarios{"erasure", "compression", "awgn2",
                                                     "early_exit", "heterogeneous"};
    if (std::find(kScenarios.begin(), kScenarios.end(), cfg.scenario) == kScenarios.end()) {
        detail::config_fail("scenario", cfg.scenario,
                            "erasure|compression|awgn2|early_exit|heterogeneous");
    }
    if (cfg.dataset_kind != "synth" && cfg.dataset_kind != "csv") {
        detail::config_fail("dataset_kind", cfg.dataset_kind, "synth|csv");
    }
    if (cfg.dataset_kind == "csv" && cfg.dataset_path.empty()) {
        detail::config_fail("dataset_path", cfg.dataset_path, "a readable CSV path");
    }
    if (cfg.dataset_delimiter.size() != 1) {
        detail::config_fail("dataset_delimiter", cfg.dataset_delimiter, "a single character");
    }
    if (cfg.repr_size == 0) detail::config_fail("repr_size", cfg.repr_size, "positive");
    if (cfg.window == 0) detail::config_fail("window", cfg.window, "positive");
    if (cfg.edge_layers == 0) detail::config_fail("edge_layers", cfg.edge_layers, "positive");
    if (cfg.server_layers == 0) detail::config_fail("server_layers", cfg.server_layers, "positive");
    if (cfg.training.lambda < 0.0 || cfg.training.lambda > 1.0) {
        detail::config_fail("lambda", cfg.training.lambda, "[0,1]");
    }
    for (double l : cfg.lambda_grid) {
        if (l < 0.0 || l > 1.0) detail::config_fail("lambda_grid", l, "[0,1]");
    }
    if (cfg.train_p < 0.0 || cfg.train_p > 1.0) detail::config_fail("train_p", cfg.train_p, "[0,1]");
    for (double p : cfg.ptr_grid) {
        if (p < 0.0 || p > 1.0) detail::config_fail("ptr_grid", p, "[0,1]");
    }
    for (double p : cfg.p_grid) {
        if (p < 0.0 || p > 1.0) detail::config_fail("p_grid", p, "[0,1]");
    }
    if (cfg.scenario == "awgn2") {
        if (cfg.m1 + cfg.m2 != cfg.repr_size) {
            detail::config_fail("m1/m2", std::to_string(cfg.m1) + "+" + std::to_string(cfg.m2),
                                "m1+m2 == repr_size (" + std::to_string(cfg.repr_size) + ")");
        }
        for (std::size_t m : cfg.m1_grid) {
            if (m > cfg.repr_size) detail::config_fail("m1_grid", m, "<= repr_size");
        }
    }
    for (std::size_t m : cfg.m_grid) {
        if (m == 0) detail::config_fail("m_grid", m, "positive");
    }
    if (cfg.seeds.empty()) detail::config_fail("seeds", "[]", "nonempty seed list");
    if (cfg.p_grid.empty()) detail::config_fail("p_grid", "[]", "nonempty grid");
    if (cfg.eval_snr1_grid.empty()) detail::config_fail("eval_snr1_grid", "[]", "nonempty grid");
    if (cfg.repeats == 0) detail::config_fail("repeats", cfg.repeats, ">= 1");
    if (cfg.format != "csv" && cfg.format != "structured-text") {
        detail::config_fail("format", cfg.format, "csv|structured-text");
    }
    if (cfg.het_edge_layers.empty()) detail::config_fail("het_edge_layers", "[]", "nonempty");
    for (std::size_t l : cfg.het_edge_layers) {
        if (l == 0) detail::config_fail("het_edge_layers", l, "positive layer counts");
    }
    double frac_sum = cfg.fractions[0] + cfg.fractions[1] + cfg.fractions[2];
    if (std::abs(frac_sum - 1.0) > 1e-9) {
        detail::config_fail("split_train/split_val/split_test", frac_sum, "fractions summing to 1");
    }

    cfg.canonical_json = j.dump();
    return cfg;
}

inline ExperimentConfig parse_config(const std::string& path) {
    return config_from_json(load_config_json(path));
}

// ---------------------------------------------------------------------------
// Result rows
// ---------------------------------------------------------------------------

struct ResultRow {
    std::string scenario;
    std::string dataset;
    std::uint64_t seed = 0;
    std::string train_setting;
    std::string eval_setting;
    int device = 1;
    std::string branch = "server";
    double mse = 0.0;
    std::size_t repeats = 1;
    double wall_ms = 0.0;
};

inline constexpr const char* kResultHeader =
    "scenario,dataset,seed,train_setting,eval_setting,device,branch,mse,repeats,wall_ms";

inline std::string to_csv_line(const ResultRow& r) {
    std::ostringstream os;
    os << r.scenario << ',' << r.dataset << ',' << r.seed << ',' << r.train_setting << ','
       << r.eval_setting << ',' << r.device << ',' << r.branch << ',' << detail::fmt_full(r.mse)
       << ',' << r.repeats << ',' << detail::fmt_full(r.wall_ms);
    return os.str();
}

inline std::vector<ResultRow> parse_results_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("parse_results_csv: cannot open " + path);
    std::string line;
    if (!std::getline(is, line) || detail::strip_cr(line) != kResultHeader) {
        throw ParseError("parse_results_csv: bad header in " + path);
    }
    std::vector<ResultRow> rows;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        line = detail::strip_cr(line);
        if (line.empty()) continue;
        const auto cells = detail::split_line(line, ',');
        if (cells.size() != 10) {
            throw ParseError("parse_results_csv: line " + std::to_string(lineno) + " has " +
                             std::to_string(cells.size()) + " cells, expected 10");
        }
        ResultRow r;
        r.scenario = cells[0];
        r.dataset = cells[1];
        r.seed = std::stoull(cells[2]);
        r.train_setting = cells[3];
        r.eval_setting = cells[4];
        r.device = std::stoi(cells[5]);
        r.branch = cells[6];
        r.mse = std::stod(cells[7]);
        r.repeats = std::stoull(cells[8]);
        r.wall_ms = std::stod(cells[9]);
        rows.push_back(std::move(r));
    }
    return rows;
}

namespace detail {

inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("emit: cannot open " + tmp.string());
        os << content;
        if (!os) throw IoError("emit: write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

}  // namespace detail

// Writes the scenario results table (plus a manifest with the config hash,
// seeds, and software version) atomically: temp file, then rename.
inline std::filesystem::path emit_results(const std::vector<ResultRow>& rows,
                                          const std::string& dir, const std::string& format,
                                          const std::string& scenario,
                                          const ExperimentConfig& cfg) {
    if (rows.empty()) throw ContractError("emit_results: no rows");
    namespace fs = std::filesystem;
    fs::path out(dir);
    fs::create_directories(out);

    std::ostringstream body;
    fs::path table;
    if (format == "csv") {
        table = out / (scenario + ".csv");
        body << kResultHeader << '\n';
        for (const ResultRow& r : rows) body << to_csv_line(r) << '\n';
    } else if (format == "structured-text") {
        table = out / (scenario + ".txt");
        for (const ResultRow& r : rows) {
            nlohmann::json o;
            o["scenario"] = r.scenario;
            o["dataset"] = r.dataset;
            o["seed"] = r.seed;
            o["train_setting"] = r.train_setting;
            o["eval_setting"] = r.eval_setting;
            o["device"] = r.device;
            o["branch"] = r.branch;
            o["mse"] = r.mse;
            o["repeats"] = r.repeats;
            o["wall_ms"] = r.wall_ms;
            body << o.dump() << '\n';
        }
    } else {
        throw ContractError("emit_results: unknown format '" + format + "'");
    }
    detail::write_file_atomic(table, body.str());

    nlohmann::json manifest;
    manifest["scenario"] = scenario;
    manifest["version"] = kVersion;
    char hash[20];
    std::snprintf(hash, sizeof hash, "%016llx",
                  static_cast<unsigned long long>(detail::fnv1a64(cfg.canonical_json)));
    manifest["config_hash"] = hash;
    manifest["seeds"] = cfg.seeds;
    manifest["rows"] = rows.size();
    manifest["format"] = format;
    manifest["table"] = table.filename().string();
    detail::write_file_atomic(out / (scenario + "_manifest.json"), manifest.dump(2) + "\n");
    return table;
}

// ---------------------------------------------------------------------------
// Sweep execution
// ---------------------------------------------------------------------------

namespace detail {

template <typename Fn>
inline void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
    if (n == 0) return;
    std::size_t workers = threads == 0 ? std::thread::hardware_concurrency() : threads;
    workers = std::min(std::max<std::size_t>(workers, 1), n);
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto body = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!error) error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(body);
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace comsplit::detail

inline SeriesDataset build_dataset(const ExperimentConfig& cfg) {
    std::vector<double> raw;
    std::string name;
    if (cfg.dataset_kind == "csv") {
        raw = load_series_csv(cfg.dataset_path, cfg.dataset_column, cfg.dataset_delimiter[0]);
        name = std::filesystem::path(cfg.dataset_path).stem().string();
    } else {
        raw = synth_series(cfg.synth_kind, cfg.synth_length, cfg.synth_params, cfg.synth_seed);
        name = cfg.synth_kind;
    }
    return make_dataset(std::move(name), std::move(raw), cfg.window, cfg.fractions);
}

// Dataset provenance record next to the result tables.
inline std::filesystem::path emit_dataset_manifest(const ExperimentConfig& cfg,
                                                   const SeriesDataset& ds) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    const fs::path path = fs::path(cfg.out_dir) / "dataset_manifest.txt";
    const std::string source = cfg.dataset_kind == "csv"
                                   ? cfg.dataset_path
                                   : "synth:" + cfg.synth_kind + ":len=" +
                                         std::to_string(cfg.synth_length) +
                                         ":seed=" + std::to_string(cfg.synth_seed);
    const std::string column = cfg.dataset_kind == "csv" ? cfg.dataset_column : "value";
    write_dataset_manifest(path.string(), ds, source, column, cfg.fractions);
    return path;
}

namespace detail {

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
    std::uint64_t x = master + 0x9e3779b97f4a7c15ULL * (index + 1);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

inline ChannelConfig erasure_or_none(double p) {
    return p == 0.0 ? ChannelConfig::none() : ChannelConfig::erasure(p);
}

inline double report_mse(double mse, const ExperimentConfig& cfg, const SeriesDataset& ds) {
    return cfg.denormalized ? mse * ds.scaler.mse_factor() : mse;
}

struct TimedEval {
    double mse = 0.0;
    double wall_ms = 0.0;
};

template <typename Fn>
inline TimedEval timed(const ExperimentConfig& cfg, Fn&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    TimedEval out;
    out.mse = fn();
    if (cfg.record_walltime) {
        out.wall_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                .count();
    }
    return out;
}

inline void maybe_save_run(const ExperimentConfig& cfg, const std::string& tag,
                           const Checkpoint& ckpt, const TrainReport& report) {
    if (!cfg.save_checkpoints) return;
    namespace fs = std::filesystem;
    fs::path dir = fs::path(cfg.out_dir) / "runs";
    fs::create_directories(dir);
    save_checkpoint((dir / (tag + ".ckpt")).string(), ckpt);
    save_train_report((dir / (tag + "_report.json")).string(), report);
}

}  // namespace comsplit::detail

// MSE over the erasure-probability grid for models trained at each p_tr;
// p_tr = 0 is the channel-agnostic baseline.
inline std::vector<ResultRow> run_erasure(const ExperimentConfig& cfg) {
    const SeriesDataset ds = build_dataset(cfg);
    struct Run {
        double ptr;
        std::uint64_t seed;
    };
    std::vector<Run> runs;
    for (double ptr : cfg.ptr_grid)
        for (std::uint64_t seed : cfg.seeds) runs.push_back({ptr, seed});

    std::vector<std::vector<ResultRow>> out(runs.size());
    detail::parallel_for(runs.size(), cfg.threads, [&](std::size_t i) {
        const auto [ptr, seed] = runs[i];
        SplitModel model = make_split_model(cfg.repr_size, cfg.edge_layers, cfg.server_layers,
                                            false, detail::erasure_or_none(ptr),
                                            detail::derive_seed(seed, 1));
        TrainConfig tc = cfg.training;
        tc.seed = detail::derive_seed(seed, 2);
        const TrainReport report = train(model, ds, tc);
        std::string setting = "ptr=" + detail::fmt_setting(ptr);
        if (report.diverged) setting += ";diverged=1";
        detail::maybe_save_run(cfg, "erasure_ptr" + detail::fmt_setting(ptr) + "_seed" +
                                        std::to_string(seed),
                               to_checkpoint(model), report);
        for (std::size_t g = 0; g < cfg.p_grid.size(); ++g) {
            const double p = cfg.p_grid[g];
            Rng eval_rng(detail::derive_seed(seed, 1000 + g));
            const ChannelConfig eval_ch = detail::erasure_or_none(p);
            const auto timed = detail::timed(cfg, [&] {
                return evaluate(model, ds, ds.test, eval_ch, eval_rng, cfg.repeats);
            });
            ResultRow row;
            row.scenario = cfg.scenario;
            row.dataset = ds.name;
            row.seed = seed;
            row.train_setting = setting;
            row.eval_setting = "p=" + detail::fmt_setting(p);
            row.mse = detail::report_mse(timed.mse, cfg, ds);
            row.repeats = eval_ch.stochastic() ? cfg.repeats : 1;
            row.wall_ms = timed.wall_ms;
            out[i].push_back(std::move(row));
        }
    });
    std::vector<ResultRow> rows;
    for (auto& r : out) rows.insert(rows.end(), r.begin(), r.end());
    return rows;
}

// MSE over the erasure grid for representation lengths in m_grid, trained at
// the fixed train_p; rows carry the compression rate CR = window / M.
inline std::vector<ResultRow> run_compression(const ExperimentConfig& cfg) {
    const SeriesDataset ds = build_dataset(cfg);
    struct Run {
        std::size_t m;
        std::uint64_t seed;
    };
    std::vector<Run> runs;
    for (std::size_t m : cfg.m_grid)
        for (std::uint64_t seed : cfg.seeds) runs.push_back({m, seed});

    std::vector<std::vector<ResultRow>> out(runs.size());
    detail::parallel_for(runs.size(), cfg.threads, [&](std::size_t i) {
        const auto [m, seed] = runs[i];
        SplitModel model = make_split_model(m, cfg.edge_layers, cfg.server_layers, false,
                                            detail::erasure_or_none(cfg.train_p),
                                            detail::derive_seed(seed, 1));
        TrainConfig tc = cfg.training;
        tc.seed = detail::derive_seed(seed, 2);
        const TrainReport report = train(model, ds, tc);
        const double cr = static_cast<double>(cfg.window) / static_cast<double>(m);
        std::string setting = "ptr=" + detail::fmt_setting(cfg.train_p) + ";M=" +
                              std::to_string(m) + ";CR=" + detail::fmt_full(cr);
        if (report.diverged) setting += ";diverged=1";
        for (std::size_t g = 0; g < cfg.p_grid.size(); ++g) {
            const double p = cfg.p_grid[g];
            Rng eval_rng(detail::derive_seed(seed, 1000 + g));
            const ChannelConfig eval_ch = detail::erasure_or_none(p);
            const auto timed = detail::timed(cfg, [&] {
                return evaluate(model, ds, ds.test, eval_ch, eval_rng, cfg.repeats);
            });
            ResultRow row;
            row.scenario = cfg.scenario;
            row.dataset = ds.name;
            row.seed = seed;
            row.train_setting = setting;
            row.eval_setting = "p=" + detail::fmt_setting(p);
            row.mse = detail::report_mse(timed.mse, cfg, ds);
            row.repeats = eval_ch.stochastic() ? cfg.repeats : 1;
            row.wall_ms = timed.wall_ms;
            out[i].push_back(std::move(row));
        }
    });
    std::vector<ResultRow> rows;
    for (auto& r : out) rows.insert(rows.end(), r.begin(), r.end());
    return rows;
}

// Two-state AWGN sweep: models trained per SNR1 (SNR2 tracking the fixed
// offset) plus the M1 composition sweep and the vanilla baseline, evaluated
// over the SNR1 grid.
inline std::vector<ResultRow> run_awgn(const ExperimentConfig& cfg) {
    const SeriesDataset ds = build_dataset(cfg);
    struct Setting {
        std::string label;
        ChannelConfig train_channel;  // kind none = vanilla
        std::size_t m1, m2;
    };
    std::vector<Setting> settings;
    auto label_of = [&](double snr1, std::size_t m1, std::size_t m2) {
        return "snr1=" + detail::fmt_setting(snr1) + ";snr2=" +
               detail::fmt_setting(snr1 + cfg.snr2_offset_db) + ";m1=" + std::to_string(m1) +
               ";m2=" + std::to_string(m2);
    };
    if (cfg.include_vanilla) {
        settings.push_back({"vanilla", ChannelConfig::none(), cfg.m1, cfg.m2});
    }
    for (double snr1 : cfg.train_snr1_grid) {
        settings.push_back({label_of(snr1, cfg.m1, cfg.m2),
                            ChannelConfig::awgn(snr1, snr1 + cfg.snr2_offset_db, cfg.m1, cfg.m2),
                            cfg.m1, cfg.m2});
    }
    for (std::size_t m1 : cfg.m1_grid) {
        const std::size_t m2 = cfg.repr_size - m1;
        const std::string label = label_of(cfg.m1_sweep_snr1, m1, m2);
        bool duplicate = false;
        for (const auto& s : settings) duplicate = duplicate || s.label == label;
        if (duplicate) continue;
        settings.push_back({label,
                            ChannelConfig::awgn(cfg.m1_sweep_snr1,
                                                cfg.m1_sweep_snr1 + cfg.snr2_offset_db, m1, m2),
                            m1, m2});
    }

    struct Run {
        std::size_t setting;
        std::uint64_t seed;
    };
    std::vector<Run> runs;
    for (std::size_t s = 0; s < settings.size(); ++s)
        for (std::uint64_t seed : cfg.seeds) runs.push_back({s, seed});

    std::vector<std::vector<ResultRow>> out(runs.size());
    detail::parallel_for(runs.size(), cfg.threads, [&](std::size_t i) {
        const auto [si, seed] = runs[i];
        const Setting& setting = settings[si];
        SplitModel model =
            make_split_model(cfg.repr_size, cfg.edge_layers, cfg.server_layers, false,
                             setting.train_channel, detail::derive_seed(seed, 1));
        TrainConfig tc = cfg.training;
        tc.seed = detail::derive_seed(seed, 2);
        const TrainReport report = train(model, ds, tc);
        std::string label = setting.label;
        if (report.diverged) label += ";diverged=1";
        for (std::size_t g = 0; g < cfg.eval_snr1_grid.size(); ++g) {
            const double snr1 = cfg.eval_snr1_grid[g];
            const ChannelConfig eval_ch = ChannelConfig::awgn(
                snr1, snr1 + cfg.snr2_offset_db, setting.m1, setting.m2);
            Rng eval_rng(detail::derive_seed(seed, 1000 + g));
            const auto timed = detail::timed(cfg, [&] {
                return evaluate(model, ds, ds.test, eval_ch, eval_rng, cfg.repeats);
            });
            ResultRow row;
            row.scenario = cfg.scenario;
            row.dataset = ds.name;
            row.seed = seed;
            row.train_setting = label;
            row.eval_setting = "snr1=" + detail::fmt_setting(snr1) + ";snr2=" +
                               detail::fmt_setting(snr1 + cfg.snr2_offset_db);
            row.mse = detail::report_mse(timed.mse, cfg, ds);
            row.repeats = cfg.repeats;
            row.wall_ms = timed.wall_ms;
            out[i].push_back(std::move(row));
        }
    });
    std::vector<ResultRow> rows;
    for (auto& r : out) rows.insert(rows.end(), r.begin(), r.end());
    return rows;
}

struct EarlyExitDecision {
    std::uint64_t seed = 0;
    double lambda = 0.5;
    double p = 0.0;
    double server_mse = 0.0;
    double ee_mse = 0.0;
    InferenceMode mode = InferenceMode::forward_to_server;
};

// Weighted early-exit training per lambda; reports both branch MSEs over the
// erasure grid (the local branch never crosses the channel, so its row is
// constant) and the server-side mode decision per grid point.
inline std::vector<ResultRow> run_early_exit(const ExperimentConfig& cfg,
                                             std::vector<EarlyExitDecision>* decisions = nullptr) {
    const SeriesDataset ds = build_dataset(cfg);
    struct Run {
        double lambda;
        std::uint64_t seed;
    };
    std::vector<Run> runs;
    for (double lambda : cfg.lambda_grid)
        for (std::uint64_t seed : cfg.seeds) runs.push_back({lambda, seed});

    std::vector<std::vector<ResultRow>> out(runs.size());
    std::vector<std::vector<EarlyExitDecision>> decision_rows(runs.size());
    detail::parallel_for(runs.size(), cfg.threads, [&](std::size_t i) {
        const auto [lambda, seed] = runs[i];
        SplitModel model = make_split_model(cfg.repr_size, cfg.edge_layers, cfg.server_layers,
                                            true, detail::erasure_or_none(cfg.train_p),
                                            detail::derive_seed(seed, 1));
        TrainConfig tc = cfg.training;
        tc.lambda = lambda;
        tc.seed = detail::derive_seed(seed, 2);
        const TrainReport report = train(model, ds, tc);
        std::string setting =
            "lambda=" + detail::fmt_setting(lambda) + ";ptr=" + detail::fmt_setting(cfg.train_p);
        if (report.diverged) setting += ";diverged=1";
        for (std::size_t g = 0; g < cfg.p_grid.size(); ++g) {
            const double p = cfg.p_grid[g];
            Rng eval_rng(detail::derive_seed(seed, 1000 + g));
            const ChannelConfig eval_ch = detail::erasure_or_none(p);
            const auto t0 = std::chrono::steady_clock::now();
            const BranchMse branches =
                evaluate_branches(model, ds, ds.test, eval_ch, eval_rng, cfg.repeats);
            const double wall =
                cfg.record_walltime
                    ? std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                                t0)
                          .count()
                    : 0.0;
            ResultRow server_row;
            server_row.scenario = cfg.scenario;
            server_row.dataset = ds.name;
            server_row.seed = seed;
            server_row.train_setting = setting;
            server_row.eval_setting = "p=" + detail::fmt_setting(p);
            server_row.branch = "server";
            server_row.mse = detail::report_mse(branches.server, cfg, ds);
            server_row.repeats = eval_ch.stochastic() ? cfg.repeats : 1;
            server_row.wall_ms = wall;
            ResultRow ee_row = server_row;
            ee_row.branch = "early_exit";
            ee_row.mse = detail::report_mse(branches.early_exit, cfg, ds);
            ee_row.repeats = 1;
            ee_row.wall_ms = 0.0;
            out[i].push_back(std::move(server_row));
            out[i].push_back(std::move(ee_row));
            EarlyExitDecision d;
            d.seed = seed;
            d.lambda = lambda;
            d.p = p;
            d.server_mse = branches.server;
            d.ee_mse = branches.early_exit;
            d.mode = select_mode(branches.server, branches.early_exit, cfg.ee_threshold);
            decision_rows[i].push_back(d);
        }
    });
    std::vector<ResultRow> rows;
    for (auto& r : out) rows.insert(rows.end(), r.begin(), r.end());
    if (decisions) {
        decisions->clear();
        for (auto& d : decision_rows) decisions->insert(decisions->end(), d.begin(), d.end());
    }
    return rows;
}

inline std::filesystem::path emit_decisions(const std::vector<EarlyExitDecision>& decisions,
                                            const ExperimentConfig& cfg) {
    namespace fs = std::filesystem;
    std::ostringstream body;
    body << "seed,lambda,p,server_mse,ee_mse,mode\n";
    for (const auto& d : decisions) {
        body << d.seed << ',' << detail::fmt_setting(d.lambda) << ',' << detail::fmt_setting(d.p)
             << ',' << detail::fmt_full(d.server_mse) << ',' << detail::fmt_full(d.ee_mse) << ','
             << to_string(d.mode) << '\n';
    }
    fs::path path = fs::path(cfg.out_dir) / "early_exit_decisions.csv";
    detail::write_file_atomic(path, body.str());
    return path;
}

// Joint two-device training over the erasure channel; per-device MSE rows
// over the evaluation grid, shared server weights across devices.
inline std::vector<ResultRow> run_heterogeneous(const ExperimentConfig& cfg) {
    const SeriesDataset ds = build_dataset(cfg);
    struct Run {
        double ptr;
        std::uint64_t seed;
    };
    std::vector<Run> runs;
    for (double ptr : cfg.ptr_grid)
        for (std::uint64_t seed : cfg.seeds) runs.push_back({ptr, seed});

    std::vector<std::vector<ResultRow>> out(runs.size());
    detail::parallel_for(runs.size(), cfg.threads, [&](std::size_t i) {
        const auto [ptr, seed] = runs[i];
        HetSplitModel model =
            make_het_split_model(cfg.repr_size, cfg.het_edge_layers, cfg.server_layers,
                                 detail::erasure_or_none(ptr), detail::derive_seed(seed, 1));
        TrainConfig tc = cfg.training;
        tc.seed = detail::derive_seed(seed, 2);
        const TrainReport report = train_het(model, ds, tc);
        std::string setting = "ptr=" + detail::fmt_setting(ptr);
        if (report.diverged) setting += ";diverged=1";
        for (std::size_t g = 0; g < cfg.p_grid.size(); ++g) {
            const double p = cfg.p_grid[g];
            Rng eval_rng(detail::derive_seed(seed, 1000 + g));
            const ChannelConfig eval_ch = detail::erasure_or_none(p);
            const auto t0 = std::chrono::steady_clock::now();
            const std::vector<double> mses =
                evaluate_het(model, ds, ds.test, eval_ch, eval_rng, cfg.repeats);
            const double wall =
                cfg.record_walltime
                    ? std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                                t0)
                          .count()
                    : 0.0;
            for (std::size_t d = 0; d < mses.size(); ++d) {
                ResultRow row;
                row.scenario = cfg.scenario;
                row.dataset = ds.name;
                row.seed = seed;
                row.train_setting = setting;
                row.eval_setting = "p=" + detail::fmt_setting(p);
                row.device = static_cast<int>(d + 1);
                row.mse = detail::report_mse(mses[d], cfg, ds);
                row.repeats = eval_ch.stochastic() ? cfg.repeats : 1;
                row.wall_ms = wall;
                out[i].push_back(std::move(row));
            }
        }
    });
    std::vector<ResultRow> rows;
    for (auto& r : out) rows.insert(rows.end(), r.begin(), r.end());
    return rows;
}

inline std::vector<ResultRow> run_scenario(const ExperimentConfig& cfg,
                                           std::vector<EarlyExitDecision>* decisions = nullptr) {
    if (cfg.scenario == "erasure") return run_erasure(cfg);
    if (cfg.scenario == "compression") return run_compression(cfg);
    if (cfg.scenario == "awgn2") return run_awgn(cfg);
    if (cfg.scenario == "early_exit") return run_early_exit(cfg, decisions);
    if (cfg.scenario == "heterogeneous") return run_heterogeneous(cfg);
    throw ContractError("run_scenario: unknown scenario '" + cfg.scenario + "'");
}

struct ScenarioInfo {
    std::string name;
    std::string description;
};

inline std::vector<ScenarioInfo> list_scenarios() {
    return {
        {"erasure",
         "erasure-probability sweep: one model per training erasure rate p_tr "
         "(p_tr=0 is the channel-agnostic baseline), tested over the p grid"},
        {"compression",
         "representation-length sweep: one model per M in m_grid trained at a fixed "
         "erasure rate, tested over the p grid; rows carry CR = N/M"},
        {"awgn2",
         "two-state AWGN sweep: models trained per SNR1 (deep-fade SNR2 = SNR1 + offset) "
         "and per M1/M2 composition, plus the no-channel baseline, tested over the SNR1 grid"},
        {"early_exit",
         "weighted early-exit training per lambda: reports server-branch and local-branch "
         "MSE over the p grid and the server-side mode decision per point"},
        {"heterogeneous",
         "two edge devices of different depths jointly trained with a shared server over "
         "the erasure channel; per-device MSE over the p grid"},
    };
}

}  // namespace comsplit
