#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "comsplit/data.hpp"
#include "comsplit/rng.hpp"
#include "comsplit/split_model.hpp"
#include "comsplit/tensor.hpp"

namespace comsplit {

struct AdamConfig {
    double alpha = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected Adam over a fixed parameter list. Moment arrays mirror the
// parameter shapes; the step counter advances by one per step().
class Adam {
public:
    explicit Adam(std::vector<Tensor> params, AdamConfig cfg = {})
        : params_(std::move(params)), cfg_(cfg) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const Tensor& p : params_) {
            m_.emplace_back(p.numel(), 0.0);
            v_.emplace_back(p.numel(), 0.0);
        }
    }

    void step() {
        for (const Tensor& p : params_) {
            if (!p.has_grad()) {
                throw ContractError("adam_step: missing gradient for parameter of shape " +
                                    detail::shape_str(p.shape()));
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i];
            const std::vector<double>& g = p.grad();
            std::vector<double>& m = m_[i];
            std::vector<double>& v = v_[i];
            std::vector<double>& w = p.values();
            for (std::size_t j = 0; j < w.size(); ++j) {
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
                const double m_hat = m[j] / bc1;
                const double v_hat = v[j] / bc2;
                w[j] -= cfg_.alpha * m_hat / (std::sqrt(v_hat) + cfg_.eps);
            }
        }
    }

    void zero_grad() { zero_grads(params_); }
    std::uint64_t step_count() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    AdamConfig cfg_;
    std::uint64_t t_ = 0;
};

// Scales gradients so their global L2 norm is at most max_norm.
inline double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
    double sq = 0.0;
    for (const Tensor& p : params) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (Tensor p : params) {
            if (!p.has_grad()) continue;
            for (double& g : p.grad()) g *= s;
        }
    }
    return norm;
}

inline std::vector<std::vector<double>> snapshot_values(const std::vector<Tensor>& params) {
    std::vector<std::vector<double>> snap;
    snap.reserve(params.size());
    for (const Tensor& p : params) snap.push_back(p.values());
    return snap;
}

inline void restore_values(const std::vector<Tensor>& params,
                           const std::vector<std::vector<double>>& snap) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor p = params[i];
        p.values() = snap[i];
    }
}

struct TrainConfig {
    std::size_t batch_size = 64;
    std::size_t max_epochs = 200;
    std::size_t patience = 10;
    AdamConfig adam{};
    double lambda = 0.5;  // early-exit loss weight
    std::uint64_t seed = 1;
    double divergence_threshold = 1e3;
    bool clip_gradients = false;
    double clip_norm = 5.0;
    // Channel draws averaged per validation pass; tames the stochastic-channel
    // noise in the early-stopping signal.
    std::size_t val_repeats = 3;
};

struct TrainReport {
    std::vector<double> train_loss;  // per epoch
    std::vector<double> val_mse;     // per epoch
    std::size_t selected_epoch = 0;  // argmin over val_mse
    double best_val_mse = std::numeric_limits<double>::infinity();
    bool diverged = false;
    std::size_t diverged_epoch = 0;
    std::uint64_t seed = 0;
    double wall_ms = 0.0;
};

inline double mse_of(const Tensor& y, const Tensor& y_hat) {
    if (y.numel() == 0) throw ContractError("mse_of: empty batch");
    detail::check_same_shape(y, y_hat, "mse_of");
    double s = 0.0;
    for (std::size_t i = 0; i < y.numel(); ++i) {
        const double d = y.at(i) - y_hat.at(i);
        s += d * d;
    }
    return s / static_cast<double>(y.numel());
}

namespace detail {

// One training run over per-device instance index lists. Every epoch each
// device's list is reshuffled; a step draws one batch per device, builds the
// joint loss, and applies one Adam update over all parameters.
struct TrainDriver {
    std::vector<std::vector<std::size_t>> device_train;
    std::size_t per_device_batch = 64;
    std::function<Tensor(const std::vector<std::pair<Tensor, Tensor>>&, Rng&)> step_loss;
    std::function<double(Rng&)> val_metric;
    std::vector<Tensor> params;
};

inline TrainReport run_train_loop(const SeriesDataset& ds, const TrainDriver& driver,
                                  const TrainConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    TrainReport report;
    report.seed = cfg.seed;

    for (const auto& idx : driver.device_train) {
        if (idx.empty()) throw ContractError("train: empty training split");
    }
    const std::size_t b = std::max<std::size_t>(1, driver.per_device_batch);
    std::size_t steps = std::numeric_limits<std::size_t>::max();
    for (const auto& idx : driver.device_train) {
        steps = std::min(steps, (idx.size() + b - 1) / b);
    }

    Rng rng(cfg.seed);
    Adam adam(driver.params, cfg.adam);
    auto indices = driver.device_train;

    auto best_snapshot = snapshot_values(driver.params);
    double best_val = std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0;
    std::size_t epochs_without_improvement = 0;

    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        for (auto& idx : indices) rng.shuffle(idx);

        double loss_sum = 0.0;
        std::size_t sample_count = 0;
        for (std::size_t step = 0; step < steps; ++step) {
            std::vector<std::pair<Tensor, Tensor>> batches;
            std::size_t step_samples = 0;
            for (const auto& idx : indices) {
                const std::size_t lo = step * b;
                const std::size_t hi = std::min(lo + b, idx.size());
                std::vector<std::size_t> batch_idx(idx.begin() + static_cast<std::ptrdiff_t>(lo),
                                                   idx.begin() + static_cast<std::ptrdiff_t>(hi));
                step_samples += batch_idx.size();
                batches.push_back(ds.batch(batch_idx));
            }
            Tensor loss = driver.step_loss(batches, rng);
            zero_grads(driver.params);
            backward(loss);
            if (cfg.clip_gradients) clip_grad_norm(driver.params, cfg.clip_norm);
            adam.step();
            loss_sum += loss.item() * static_cast<double>(step_samples);
            sample_count += step_samples;
        }
        const double train_loss = loss_sum / static_cast<double>(sample_count);
        report.train_loss.push_back(train_loss);

        if (!std::isfinite(train_loss) || train_loss > cfg.divergence_threshold) {
            report.diverged = true;
            report.diverged_epoch = epoch;
            break;
        }

        const double val = driver.val_metric(rng);
        report.val_mse.push_back(val);
        if (val < best_val) {
            best_val = val;
            best_epoch = epoch;
            best_snapshot = snapshot_values(driver.params);
            epochs_without_improvement = 0;
        } else {
            ++epochs_without_improvement;
        }
        if (epochs_without_improvement >= cfg.patience) break;
    }

    restore_values(driver.params, best_snapshot);
    report.selected_epoch = best_epoch;
    report.best_val_mse = best_val;
    report.wall_ms = std::chrono::duration<double, std::milli>(
                         std::chrono::steady_clock::now() - t0)
                         .count();
    return report;
}

// Training/validation instance ranges; carves the last tenth of the training
// range out as validation when the dataset has none (70/30-style splits).
inline std::pair<SplitRange, SplitRange> effective_splits(const SeriesDataset& ds) {
    if (!ds.val.empty()) return {ds.train, ds.val};
    const std::size_t carved = std::max<std::size_t>(1, ds.train.size() / 10);
    if (carved >= ds.train.size()) throw ContractError("train: training split too small");
    return {SplitRange{ds.train.begin, ds.train.end - carved},
            SplitRange{ds.train.end - carved, ds.train.end}};
}

inline std::vector<std::size_t> range_indices(const SplitRange& r) {
    std::vector<std::size_t> idx(r.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = r.begin + i;
    return idx;
}

}  // namespace detail

// Trains a split model (with or without early-exit head) with the channel
// layer active at the model's fixed training configuration. Returns the
// best-validation parameters in-place.
inline TrainReport train(SplitModel& model, const SeriesDataset& ds, const TrainConfig& cfg) {
    model.validate();
    const auto [train_range, val_range] = detail::effective_splits(ds);
    const bool use_ee = model.ee_head.has_value();
    if (use_ee && (cfg.lambda < 0.0 || cfg.lambda > 1.0)) {
        throw ContractError("train: lambda = " + std::to_string(cfg.lambda) + " outside [0,1]");
    }

    detail::TrainDriver driver;
    driver.device_train = {detail::range_indices(train_range)};
    driver.per_device_batch = cfg.batch_size;
    driver.params = model.parameters();
    driver.step_loss = [&model, &cfg, use_ee](const std::vector<std::pair<Tensor, Tensor>>& batches,
                                              Rng& rng) {
        const Tensor& x = batches[0].first;
        const Tensor& y = batches[0].second;
        SplitForward f = split_forward(model, x, rng);
        return use_ee ? loss_ee(y, f.y_hat, *f.y_hat_ee, cfg.lambda) : loss_mse(y, f.y_hat);
    };
    driver.val_metric = [&model, &ds, &cfg, use_ee, val_range = val_range](Rng& rng) {
        NoGradGuard no_grad;
        auto [x, y] = ds.batch(val_range);
        const Tensor z = edge_forward(x, model.edge);
        ChannelLayer layer = channel_as_layer(model.channel, rng);
        const std::size_t reps =
            model.channel.stochastic() ? std::max<std::size_t>(1, cfg.val_repeats) : 1;
        double server = 0.0;
        for (std::size_t r = 0; r < reps; ++r) {
            server += mse_of(y, server_forward(layer(z), model.server));
        }
        server /= static_cast<double>(reps);
        if (!use_ee) return server;
        return cfg.lambda * server + (1.0 - cfg.lambda) * mse_of(y, ee_forward(z, model.ee_head));
    };
    return detail::run_train_loop(ds, driver, cfg);
}

// Joint training of C edge devices and the shared server. The training
// instances are partitioned between devices by alternating blocks of 64 and
// each step processes one half-batch per device through its own channel
// realization, backpropagating the summed per-device loss.
inline TrainReport train_het(HetSplitModel& model, const SeriesDataset& ds,
                             const TrainConfig& cfg) {
    model.validate();
    const std::size_t devices = model.device_count();
    const auto [train_range, val_range] = detail::effective_splits(ds);

    detail::TrainDriver driver;
    driver.device_train = partition_blocks(train_range, devices, 64);
    driver.per_device_batch = std::max<std::size_t>(
        1, cfg.batch_size / std::max<std::size_t>(2, devices));
    driver.params = model.parameters();
    driver.step_loss = [&model](const std::vector<std::pair<Tensor, Tensor>>& batches, Rng& rng) {
        std::vector<Tensor> xs, ys;
        xs.reserve(batches.size());
        ys.reserve(batches.size());
        for (const auto& [x, y] : batches) {
            xs.push_back(x);
            ys.push_back(y);
        }
        return loss_het(ys, het_forward(xs, model, rng));
    };
    driver.val_metric = [&model, &ds, &cfg, val_range = val_range](Rng& rng) {
        NoGradGuard no_grad;
        auto [x, y] = ds.batch(val_range);
        ChannelLayer channel = channel_as_layer(model.channel, rng);
        const std::size_t reps =
            model.channel.stochastic() ? std::max<std::size_t>(1, cfg.val_repeats) : 1;
        double total = 0.0;
        for (const auto& edge : model.edges) {
            const Tensor z = edge_forward(x, edge);
            double device = 0.0;
            for (std::size_t r = 0; r < reps; ++r) {
                device += mse_of(y, server_forward(channel(z), model.server));
            }
            total += device / static_cast<double>(reps);
        }
        return total;
    };
    return detail::run_train_loop(ds, driver, cfg);
}

// Mean test MSE averaged over independent channel draws. Deterministic
// channels collapse to a single pass. Model parameters are untouched.
inline double evaluate(const SplitModel& model, const SeriesDataset& ds, const SplitRange& split,
                       const ChannelConfig& channel, Rng& rng, std::size_t repeats = 10) {
    if (split.empty()) throw ContractError("evaluate: empty test split");
    if (repeats == 0) throw ContractError("evaluate: repeats must be >= 1");
    channel.validate(model.representation_size());
    NoGradGuard no_grad;
    auto [x, y] = ds.batch(split);
    const Tensor z = edge_forward(x, model.edge);
    ChannelLayer layer = channel_as_layer(channel, rng);
    const std::size_t reps = channel.stochastic() ? repeats : 1;
    double total = 0.0;
    for (std::size_t r = 0; r < reps; ++r) {
        total += mse_of(y, server_forward(layer(z), model.server));
    }
    return total / static_cast<double>(reps);
}

struct BranchMse {
    double server = 0.0;
    double early_exit = 0.0;
};

// Server branch under the given channel; early-exit branch is local and
// channel-free by construction.
inline BranchMse evaluate_branches(const SplitModel& model, const SeriesDataset& ds,
                                   const SplitRange& split, const ChannelConfig& channel,
                                   Rng& rng, std::size_t repeats = 10) {
    if (!model.ee_head) throw ContractError("evaluate_branches: model has no early-exit head");
    if (split.empty()) throw ContractError("evaluate_branches: empty test split");
    NoGradGuard no_grad;
    auto [x, y] = ds.batch(split);
    const Tensor z = edge_forward(x, model.edge);
    BranchMse out;
    out.early_exit = mse_of(y, ee_forward(z, model.ee_head));
    ChannelLayer layer = channel_as_layer(channel, rng);
    const std::size_t reps = channel.stochastic() ? repeats : 1;
    double total = 0.0;
    for (std::size_t r = 0; r < reps; ++r) {
        total += mse_of(y, server_forward(layer(z), model.server));
    }
    out.server = total / static_cast<double>(reps);
    return out;
}

// Per-device MSE on a shared test split (every device sees the same data, so
// the capability comparison is apples to apples).
inline std::vector<double> evaluate_het(const HetSplitModel& model, const SeriesDataset& ds,
                                        const SplitRange& split, const ChannelConfig& channel,
                                        Rng& rng, std::size_t repeats = 10) {
    if (split.empty()) throw ContractError("evaluate_het: empty test split");
    if (repeats == 0) throw ContractError("evaluate_het: repeats must be >= 1");
    NoGradGuard no_grad;
    auto [x, y] = ds.batch(split);
    ChannelLayer layer = channel_as_layer(channel, rng);
    const std::size_t reps = channel.stochastic() ? repeats : 1;
    std::vector<double> out;
    out.reserve(model.device_count());
    for (const auto& edge : model.edges) {
        const Tensor z = edge_forward(x, edge);
        double total = 0.0;
        for (std::size_t r = 0; r < reps; ++r) {
            total += mse_of(y, server_forward(layer(z), model.server));
        }
        out.push_back(total / static_cast<double>(reps));
    }
    return out;
}

// Structured-text (JSON) training report, written next to checkpoints.
inline void save_train_report(const std::string& path, const TrainReport& r) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("save_train_report: cannot open " + path);
    os.precision(17);
    os << "{\n"
       << "  \"seed\": " << r.seed << ",\n"
       << "  \"selected_epoch\": " << r.selected_epoch << ",\n"
       << "  \"best_val_mse\": " << r.best_val_mse << ",\n"
       << "  \"diverged\": " << (r.diverged ? "true" : "false") << ",\n"
       << "  \"diverged_epoch\": " << r.diverged_epoch << ",\n"
       << "  \"wall_ms\": " << r.wall_ms << ",\n";
    os << "  \"train_loss\": [";
    for (std::size_t i = 0; i < r.train_loss.size(); ++i) {
        if (i) os << ", ";
        os << r.train_loss[i];
    }
    os << "],\n  \"val_mse\": [";
    for (std::size_t i = 0; i < r.val_mse.size(); ++i) {
        if (i) os << ", ";
        os << r.val_mse[i];
    }
    os << "]\n}\n";
}

}  // namespace comsplit
