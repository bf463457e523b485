#pragma once

#include <algorithm>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "comsplit/channel.hpp"
#include "comsplit/optim.hpp"
#include "comsplit/split_model.hpp"
#include "comsplit/tensor.hpp"

namespace comsplit {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::size_t elements = 0;

    bool pass(double tol = 1e-5) const { return elements > 0 && max_rel_err < tol; }
};

// Central finite differences against reverse-mode gradients. `forward` must
// rebuild the scalar loss from the current parameter values on every call;
// the numeric side never touches the backward pass it is checking.
// Relative error uses max(|g_a|, |g_n|, floor) as denominator so that
// near-zero gradients are compared absolutely.
inline GradCheckResult check_gradients(const std::function<Tensor()>& forward,
                                       const std::vector<Tensor>& params, double h = 1e-5,
                                       double denom_floor = 1e-3) {
    zero_grads(params);
    backward(forward());
    GradCheckResult res;
    NoGradGuard no_grad;
    for (Tensor p : params) {
        if (!p.has_grad()) continue;
        std::vector<double>& w = p.values();
        const std::vector<double> analytic = p.grad();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double orig = w[i];
            w[i] = orig + h;
            const double up = forward().item();
            w[i] = orig - h;
            const double down = forward().item();
            w[i] = orig;
            const double numeric = (up - down) / (2.0 * h);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), denom_floor});
            res.max_rel_err = std::max(res.max_rel_err, std::abs(analytic[i] - numeric) / denom);
            ++res.elements;
        }
    }
    return res;
}

// Gradient check of the full split model under both loss functions, with the
// channel realization held fixed across finite-difference re-evaluations.
struct SplitGradCheck {
    GradCheckResult mse_erasure;
    GradCheckResult ee_erasure;
    GradCheckResult mse_awgn;
    GradCheckResult ee_awgn;

    bool pass(double tol = 1e-5) const {
        return mse_erasure.pass(tol) && ee_erasure.pass(tol) && mse_awgn.pass(tol) &&
               ee_awgn.pass(tol);
    }
};

inline SplitGradCheck gradcheck_split_model(std::size_t repr_size = 4, std::size_t edge_layers = 1,
                                            std::size_t server_layers = 2, std::size_t steps = 5,
                                            std::size_t batch = 3, double lambda = 0.5,
                                            std::uint64_t seed = 17) {
    SplitModel model = make_split_model(repr_size, edge_layers, server_layers, true,
                                        ChannelConfig::none(), seed);
    const std::vector<Tensor> params = model.parameters();

    Rng rng(seed + 1);
    std::vector<double> xv(batch * steps), yv(batch);
    for (double& v : xv) v = rng.uniform(-1.0, 1.0);
    for (double& v : yv) v = rng.uniform(-1.0, 1.0);
    const Tensor x = Tensor::from({batch, steps}, xv);
    const Tensor y = Tensor::from({batch, 1}, std::move(yv));

    // fixed erasure mask at p = 0.3 and fixed two-state noise at 5/0 dB
    std::vector<double> mask(batch * repr_size);
    for (double& m : mask) m = rng.bernoulli(0.7) ? 1.0 : 0.0;
    std::vector<double> noise(batch * repr_size);
    {
        NoGradGuard no_grad;
        const Tensor z0 = edge_forward(x, model.edge);
        const ChannelConfig awgn =
            ChannelConfig::awgn(5.0, 0.0, repr_size - repr_size / 2, repr_size / 2);
        std::vector<double> row(repr_size);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t j = 0; j < repr_size; ++j) row[j] = z0.at(b * repr_size + j);
            const Awgn2Draw draw = awgn2_draw_row(row, awgn, rng);
            for (std::size_t j = 0; j < repr_size; ++j) noise[b * repr_size + j] = draw.noise[j];
        }
    }

    auto forward = [&](bool use_mask, bool use_ee) {
        return [&, use_mask, use_ee]() {
            Tensor z = edge_forward(x, model.edge);
            Tensor z_hat = use_mask ? mul_mask(z, mask) : add_offset(z, noise);
            Tensor y_hat = server_forward(z_hat, model.server);
            if (!use_ee) return loss_mse(y, y_hat);
            return loss_ee(y, y_hat, ee_forward(z, model.ee_head), lambda);
        };
    };

    SplitGradCheck out;
    out.mse_erasure = check_gradients(forward(true, false), params);
    out.ee_erasure = check_gradients(forward(true, true), params);
    out.mse_awgn = check_gradients(forward(false, false), params);
    out.ee_awgn = check_gradients(forward(false, true), params);
    return out;
}

inline bool run_gradcheck_suite(std::ostream& os, double tol = 1e-5) {
    const SplitGradCheck res = gradcheck_split_model();
    auto line = [&](const char* name, const GradCheckResult& r) {
        os << (r.pass(tol) ? "pass" : "FAIL") << "  " << name << "  max_rel_err=" << r.max_rel_err
           << "  (" << r.elements << " parameter elements)\n";
    };
    line("loss_mse + erasure(mask fixed) ", res.mse_erasure);
    line("loss_ee  + erasure(mask fixed) ", res.ee_erasure);
    line("loss_mse + awgn2(noise fixed)  ", res.mse_awgn);
    line("loss_ee  + awgn2(noise fixed)  ", res.ee_awgn);
    return res.pass(tol);
}

}  // namespace comsplit
