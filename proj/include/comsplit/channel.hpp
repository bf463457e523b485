#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "comsplit/rng.hpp"
#include "comsplit/tensor.hpp"

namespace comsplit {

enum class ChannelKind { none, erasure, awgn2 };

inline const char* to_string(ChannelKind k) {
    switch (k) {
        case ChannelKind::none: return "none";
        case ChannelKind::erasure: return "erasure";
        case ChannelKind::awgn2: return "awgn2";
    }
    return "?";
}

// Channel between the edge output and the server input. For awgn2, m1
// symbols get variance sigma1^2 and m2 randomly placed symbols get the
// deeper fade sigma2^2, with m1 + m2 equal to the representation length.
struct ChannelConfig {
    ChannelKind kind = ChannelKind::none;
    double p = 0.0;         // erasure probability
    double snr1_db = 0.0;   // non-deep-fade symbols
    double snr2_db = 0.0;   // deep-fade symbols
    std::size_t m1 = 0;
    std::size_t m2 = 0;

    static ChannelConfig none() { return {}; }

    static ChannelConfig erasure(double p) {
        ChannelConfig c;
        c.kind = ChannelKind::erasure;
        c.p = p;
        return c;
    }

    static ChannelConfig awgn(double snr1_db, double snr2_db, std::size_t m1, std::size_t m2) {
        ChannelConfig c;
        c.kind = ChannelKind::awgn2;
        c.snr1_db = snr1_db;
        c.snr2_db = snr2_db;
        c.m1 = m1;
        c.m2 = m2;
        return c;
    }

    // True when a forward pass consumes randomness.
    bool stochastic() const {
        return (kind == ChannelKind::erasure && p > 0.0) || kind == ChannelKind::awgn2;
    }

    void validate(std::size_t repr_size) const {
        if (kind == ChannelKind::erasure && (p < 0.0 || p > 1.0)) {
            throw ContractError("channel: erasure probability " + std::to_string(p) +
                                " outside [0,1]");
        }
        if (kind == ChannelKind::awgn2 && m1 + m2 != repr_size) {
            throw ContractError("channel: m1+m2 = " + std::to_string(m1) + "+" +
                                std::to_string(m2) + " != representation length " +
                                std::to_string(repr_size));
        }
    }
};

// sigma^2 = R / 10^(snr_db/10) with R the mean squared symbol power of the
// representation. All-zero input is degenerate: returns 0 and sets the flag.
inline double snr_to_var(const std::vector<double>& z, double snr_db, bool* degenerate = nullptr) {
    if (!std::isfinite(snr_db)) throw ContractError("snr_to_var: snr_db must be finite");
    if (z.empty()) throw ContractError("snr_to_var: empty representation");
    double r = 0.0;
    for (double v : z) r += v * v;
    r /= static_cast<double>(z.size());
    if (degenerate) *degenerate = (r == 0.0);
    if (r == 0.0) return 0.0;
    return r / std::pow(10.0, snr_db / 10.0);
}

inline double snr_to_var(const Tensor& z, double snr_db, bool* degenerate = nullptr) {
    return snr_to_var(z.values(), snr_db, degenerate);
}

// Erasure channel z_hat = z (.) q with q_i ~ Bernoulli(1-p). Each symbol of
// each row is zeroed independently; survivors pass unchanged (no 1/(1-p)
// rescaling). Backward passes g (.) q.
inline Tensor erasure_apply(const Tensor& z, double p, Rng& rng) {
    if (p < 0.0 || p > 1.0) {
        throw ContractError("erasure_apply: p = " + std::to_string(p) + " outside [0,1]");
    }
    std::vector<double> mask(z.numel());
    for (double& m : mask) m = rng.bernoulli(1.0 - p) ? 1.0 : 0.0;
    return mul_mask(z, std::move(mask));
}

// One two-state AWGN draw for a single representation row. Standard normals
// are drawn for every symbol before the deep-fade positions are selected, so
// equal variances produce identical noise regardless of the m1/m2 split.
struct Awgn2Draw {
    std::vector<double> noise;
    std::vector<std::size_t> fade_positions;  // positions with variance sigma2^2
    double var1 = 0.0;
    double var2 = 0.0;
    bool degenerate = false;  // zero-power representation
};

inline Awgn2Draw awgn2_draw_row(const std::vector<double>& z_row, const ChannelConfig& cfg,
                                Rng& rng) {
    cfg.validate(z_row.size());
    Awgn2Draw draw;
    draw.var1 = snr_to_var(z_row, cfg.snr1_db, &draw.degenerate);
    draw.var2 = snr_to_var(z_row, cfg.snr2_db);
    const double s1 = std::sqrt(draw.var1);
    const double s2 = std::sqrt(draw.var2);
    draw.noise.resize(z_row.size());
    for (double& n : draw.noise) n = rng.normal();
    draw.fade_positions = rng.sample_without_replacement(z_row.size(), cfg.m2);
    std::vector<bool> deep(z_row.size(), false);
    for (std::size_t i : draw.fade_positions) deep[i] = true;
    for (std::size_t i = 0; i < draw.noise.size(); ++i) {
        draw.noise[i] *= deep[i] ? s2 : s1;
    }
    return draw;
}

// Two-state AWGN z_hat = z + n applied per row with per-row SNR calibration.
// Non-trainable additive layer: backward is the identity.
inline Tensor awgn2_apply(const Tensor& z, const ChannelConfig& cfg, Rng& rng) {
    const std::size_t m = z.cols();
    cfg.validate(m);
    const std::size_t rows = z.rank() == 2 ? z.shape()[0] : 1;
    std::vector<double> noise(z.numel());
    std::vector<double> row(m);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < m; ++j) row[j] = z.at(r * m + j);
        Awgn2Draw draw = awgn2_draw_row(row, cfg, rng);
        for (std::size_t j = 0; j < m; ++j) noise[r * m + j] = draw.noise[j];
    }
    return add_offset(z, noise);
}

using ChannelLayer = std::function<Tensor(const Tensor&)>;

// Graph-insertable channel layer; draws fresh randomness from `rng` on every
// forward call. `rng` must outlive the returned layer.
inline ChannelLayer channel_as_layer(const ChannelConfig& cfg, Rng& rng) {
    switch (cfg.kind) {
        case ChannelKind::none:
            return [](const Tensor& z) { return z; };
        case ChannelKind::erasure:
            return [cfg, &rng](const Tensor& z) { return erasure_apply(z, cfg.p, rng); };
        case ChannelKind::awgn2:
            return [cfg, &rng](const Tensor& z) { return awgn2_apply(z, cfg, rng); };
    }
    return [](const Tensor& z) { return z; };
}

}  // namespace comsplit
