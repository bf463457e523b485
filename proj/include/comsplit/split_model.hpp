#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "comsplit/channel.hpp"
#include "comsplit/nn.hpp"
#include "comsplit/tensor.hpp"

namespace comsplit {

// Edge sub-network, channel binding, server sub-network, and an optional
// early-exit head on the edge side. The representation z transmitted to the
// server is the final hidden state of the edge stack (M = H symbols), and
// the server consumes it as a length-1 sequence.
struct SplitModel {
    LstmStackParams edge;    // no fc head
    LstmStackParams server;  // fc head required
    std::optional<LinearHead> ee_head;
    ChannelConfig channel;

    std::size_t representation_size() const { return edge.hidden_size(); }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out = edge.parameters();
        auto server_params = server.parameters();
        out.insert(out.end(), server_params.begin(), server_params.end());
        if (ee_head) {
            out.push_back(ee_head->w);
            out.push_back(ee_head->b);
        }
        return out;
    }

    void validate() const {
        if (!server.fc) throw ContractError("SplitModel: server stack has no fc head");
        const std::size_t m = representation_size();
        if (server.layers.front().input_size() != m) {
            throw ContractError("SplitModel: edge hidden size " + std::to_string(m) +
                                " != server input size " +
                                std::to_string(server.layers.front().input_size()));
        }
        if (ee_head && ee_head->input_size() != m) {
            throw ContractError("SplitModel: early-exit head width " +
                                std::to_string(ee_head->input_size()) + " != " + std::to_string(m));
        }
        channel.validate(m);
    }
};

// C edge sub-networks of differing depths sharing one server sub-network.
struct HetSplitModel {
    std::vector<LstmStackParams> edges;
    LstmStackParams server;
    ChannelConfig channel;

    std::size_t device_count() const { return edges.size(); }
    std::size_t representation_size() const { return server.layers.front().input_size(); }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (const auto& e : edges) {
            auto p = e.parameters();
            out.insert(out.end(), p.begin(), p.end());
        }
        auto p = server.parameters();
        out.insert(out.end(), p.begin(), p.end());
        return out;
    }

    void validate() const {
        if (edges.empty()) throw ContractError("HetSplitModel: no edge devices");
        if (!server.fc) throw ContractError("HetSplitModel: server stack has no fc head");
        const std::size_t m = representation_size();
        for (std::size_t i = 0; i < edges.size(); ++i) {
            if (edges[i].hidden_size() != m) {
                throw ContractError("HetSplitModel: edge " + std::to_string(i) + " width " +
                                    std::to_string(edges[i].hidden_size()) + " != " +
                                    std::to_string(m));
            }
        }
        channel.validate(m);
    }
};

// Parameter draw order is pinned: edge layers, server layers, early-exit head.
inline SplitModel make_split_model(std::size_t repr_size, std::size_t edge_layers,
                                   std::size_t server_layers, bool with_ee,
                                   ChannelConfig channel, std::uint64_t seed) {
    if (repr_size == 0 || edge_layers == 0 || server_layers == 0) {
        throw ContractError("make_split_model: sizes must be positive");
    }
    Rng rng(seed);
    SplitModel m;
    std::size_t d = 1;
    for (std::size_t l = 0; l < edge_layers; ++l) {
        m.edge.layers.push_back(init_lstm_layer(d, repr_size, rng));
        d = repr_size;
    }
    d = repr_size;
    for (std::size_t l = 0; l < server_layers; ++l) {
        m.server.layers.push_back(init_lstm_layer(d, repr_size, rng));
        d = repr_size;
    }
    m.server.fc = init_linear_head(repr_size, rng);
    if (with_ee) m.ee_head = init_linear_head(repr_size, rng);
    m.channel = std::move(channel);
    m.validate();
    return m;
}

inline HetSplitModel make_het_split_model(std::size_t repr_size,
                                          const std::vector<std::size_t>& edge_layer_counts,
                                          std::size_t server_layers, ChannelConfig channel,
                                          std::uint64_t seed) {
    if (edge_layer_counts.empty()) throw ContractError("make_het_split_model: no devices");
    Rng rng(seed);
    HetSplitModel m;
    for (std::size_t layers : edge_layer_counts) {
        if (layers == 0) throw ContractError("make_het_split_model: zero-layer edge");
        LstmStackParams edge;
        std::size_t d = 1;
        for (std::size_t l = 0; l < layers; ++l) {
            edge.layers.push_back(init_lstm_layer(d, repr_size, rng));
            d = repr_size;
        }
        m.edges.push_back(std::move(edge));
    }
    std::size_t d = repr_size;
    for (std::size_t l = 0; l < server_layers; ++l) {
        m.server.layers.push_back(init_lstm_layer(d, repr_size, rng));
        d = repr_size;
    }
    m.server.fc = init_linear_head(repr_size, rng);
    m.channel = std::move(channel);
    m.validate();
    return m;
}

// z = f_E(x): runs the edge stack over the T scalar steps of x [B x T] and
// returns the last layer's final hidden state [B x M].
inline Tensor edge_forward(const Tensor& x, const LstmStackParams& edge) {
    if (x.rank() != 2) {
        throw ContractError("edge_forward: expected [B x T] input, got " +
                            detail::shape_str(x.shape()));
    }
    if (edge.layers.front().input_size() != 1) {
        throw ContractError("edge_forward: first edge layer input width must be 1");
    }
    const std::size_t batch = x.shape()[0], steps = x.shape()[1];
    std::vector<Tensor> seq;
    seq.reserve(steps);
    for (std::size_t t = 0; t < steps; ++t) {
        std::vector<double> col(batch);
        for (std::size_t b = 0; b < batch; ++b) col[b] = x.at(b, t);
        seq.push_back(Tensor::from({batch, 1}, std::move(col)));
    }
    StackTrace trace = lstm_stack_forward(seq, edge.layers);
    return trace.final_state.h.back();
}

// y_hat = f_S(z_hat): the received representation is a length-1 sequence
// through the server stack (zero initial states), then the fc head.
inline Tensor server_forward(const Tensor& z_hat, const LstmStackParams& server) {
    if (!server.fc) throw ContractError("server_forward: server stack has no fc head");
    if (z_hat.rank() != 2 || z_hat.shape()[1] != server.layers.front().input_size()) {
        throw ContractError("server_forward: representation " + detail::shape_str(z_hat.shape()) +
                            " vs server input width " +
                            std::to_string(server.layers.front().input_size()));
    }
    StackTrace trace = lstm_stack_forward({z_hat}, server.layers);
    return fc_forward(trace.final_state.h.back(), *server.fc);
}

// y_hat_ee = f_ee(z): local linear readout of the pre-channel representation.
inline Tensor ee_forward(const Tensor& z, const std::optional<LinearHead>& head) {
    if (!head) throw ContractError("ee_forward: model has no early-exit head");
    return fc_forward(z, *head);
}

struct SplitForward {
    Tensor z;      // pre-channel representation
    Tensor z_hat;  // post-channel representation
    Tensor y_hat;  // server prediction [B x 1]
    std::optional<Tensor> y_hat_ee;
};

inline SplitForward split_forward(const SplitModel& model, const Tensor& x, Rng& rng) {
    SplitForward out;
    out.z = edge_forward(x, model.edge);
    out.z_hat = channel_as_layer(model.channel, rng)(out.z);
    out.y_hat = server_forward(out.z_hat, model.server);
    if (model.ee_head) out.y_hat_ee = ee_forward(out.z, model.ee_head);
    return out;
}

// L = 1/P sum (y - y_hat)^2
inline Tensor loss_mse(const Tensor& y, const Tensor& y_hat) {
    if (!y.defined() || !y_hat.defined() || y.numel() == 0) {
        throw ContractError("loss_mse: empty batch");
    }
    detail::check_same_shape(y, y_hat, "loss_mse");
    return mean(square(sub(y, y_hat)));
}

// L_ee = lambda L(y_hat, y) + (1 - lambda) L(y_hat_ee, y)
inline Tensor loss_ee(const Tensor& y, const Tensor& y_hat, const Tensor& y_hat_ee,
                      double lambda) {
    if (lambda < 0.0 || lambda > 1.0) {
        throw ContractError("loss_ee: lambda = " + std::to_string(lambda) + " outside [0,1]");
    }
    return add(scale(loss_mse(y, y_hat), lambda), scale(loss_mse(y, y_hat_ee), 1.0 - lambda));
}

// Per-device forward through the shared server; each device-to-server
// transmission draws its own channel realization.
inline std::vector<Tensor> het_forward(const std::vector<Tensor>& x_batches,
                                       const HetSplitModel& model, Rng& rng) {
    if (x_batches.size() != model.device_count()) {
        throw ContractError("het_forward: " + std::to_string(x_batches.size()) +
                            " batches for " + std::to_string(model.device_count()) + " devices");
    }
    model.validate();
    ChannelLayer channel = channel_as_layer(model.channel, rng);
    std::vector<Tensor> predictions;
    predictions.reserve(x_batches.size());
    for (std::size_t i = 0; i < x_batches.size(); ++i) {
        Tensor z = edge_forward(x_batches[i], model.edges[i]);
        predictions.push_back(server_forward(channel(z), model.server));
    }
    return predictions;
}

// L_het = sum_i L_i(y_i, y_hat_i)
inline Tensor loss_het(const std::vector<Tensor>& ys, const std::vector<Tensor>& y_hats) {
    if (ys.empty() || ys.size() != y_hats.size()) {
        throw ContractError("loss_het: misaligned device lists (" + std::to_string(ys.size()) +
                            " vs " + std::to_string(y_hats.size()) + ")");
    }
    Tensor total = loss_mse(ys[0], y_hats[0]);
    for (std::size_t i = 1; i < ys.size(); ++i) {
        total = add(total, loss_mse(ys[i], y_hats[i]));
    }
    return total;
}

enum class InferenceMode { forward_to_server, exit_locally };

inline const char* to_string(InferenceMode m) {
    return m == InferenceMode::exit_locally ? "exit_locally" : "forward_to_server";
}

// Server-side operating-mode decision from validation MSEs. With a positive
// fixed threshold the server exits locally whenever its own MSE exceeds it;
// otherwise the two branch MSEs are compared, ties favoring the server.
inline InferenceMode select_mode(double server_val_mse, double ee_val_mse,
                                 double threshold = 0.0) {
    if (!std::isfinite(server_val_mse) || !std::isfinite(ee_val_mse)) {
        throw ContractError("select_mode: MSEs must be finite");
    }
    if (threshold > 0.0) {
        return server_val_mse > threshold ? InferenceMode::exit_locally
                                          : InferenceMode::forward_to_server;
    }
    return server_val_mse > ee_val_mse ? InferenceMode::exit_locally
                                       : InferenceMode::forward_to_server;
}

// ---------------------------------------------------------------------------
// Model checkpoints
// ---------------------------------------------------------------------------

namespace detail {

inline void append_stack(Checkpoint& ckpt, const std::string& prefix,
                         const LstmStackParams& stack) {
    for (std::size_t l = 0; l < stack.layers.size(); ++l) {
        const std::string base = prefix + ".l" + std::to_string(l);
        ckpt.tensors.emplace_back(base + ".w_ih", stack.layers[l].w_ih);
        ckpt.tensors.emplace_back(base + ".w_hh", stack.layers[l].w_hh);
        ckpt.tensors.emplace_back(base + ".bias", stack.layers[l].bias);
    }
    if (stack.fc) {
        ckpt.tensors.emplace_back(prefix + ".fc.w", stack.fc->w);
        ckpt.tensors.emplace_back(prefix + ".fc.b", stack.fc->b);
    }
}

inline Tensor take_tensor(const Checkpoint& ckpt, const std::string& name) {
    for (const auto& [n, t] : ckpt.tensors) {
        if (n == name) return t;
    }
    throw std::runtime_error("checkpoint: missing tensor " + name);
}

inline bool has_tensor(const Checkpoint& ckpt, const std::string& name) {
    for (const auto& [n, t] : ckpt.tensors) {
        if (n == name) return true;
    }
    return false;
}

inline LstmStackParams read_stack(const Checkpoint& ckpt, const std::string& prefix) {
    LstmStackParams stack;
    for (std::size_t l = 0;; ++l) {
        const std::string base = prefix + ".l" + std::to_string(l);
        if (!has_tensor(ckpt, base + ".w_ih")) break;
        LstmLayerParams layer;
        layer.w_ih = take_tensor(ckpt, base + ".w_ih");
        layer.w_hh = take_tensor(ckpt, base + ".w_hh");
        layer.bias = take_tensor(ckpt, base + ".bias");
        stack.layers.push_back(std::move(layer));
    }
    if (has_tensor(ckpt, prefix + ".fc.w")) {
        stack.fc = LinearHead{take_tensor(ckpt, prefix + ".fc.w"),
                              take_tensor(ckpt, prefix + ".fc.b")};
    }
    return stack;
}

}  // namespace detail

inline Checkpoint to_checkpoint(const SplitModel& model) {
    Checkpoint ckpt;
    ckpt.model_kind = model.ee_head ? "early_exit" : "baseline";
    detail::append_stack(ckpt, "edge", model.edge);
    detail::append_stack(ckpt, "server", model.server);
    if (model.ee_head) {
        ckpt.tensors.emplace_back("ee.w", model.ee_head->w);
        ckpt.tensors.emplace_back("ee.b", model.ee_head->b);
    }
    return ckpt;
}

inline Checkpoint to_checkpoint(const HetSplitModel& model) {
    Checkpoint ckpt;
    ckpt.model_kind = "heterogeneous";
    for (std::size_t i = 0; i < model.edges.size(); ++i) {
        detail::append_stack(ckpt, "edge" + std::to_string(i), model.edges[i]);
    }
    detail::append_stack(ckpt, "server", model.server);
    return ckpt;
}

inline SplitModel split_model_from_checkpoint(const Checkpoint& ckpt, ChannelConfig channel) {
    if (ckpt.model_kind != "baseline" && ckpt.model_kind != "early_exit") {
        throw std::runtime_error("checkpoint: kind '" + ckpt.model_kind + "' is not a split model");
    }
    SplitModel m;
    m.edge = detail::read_stack(ckpt, "edge");
    m.server = detail::read_stack(ckpt, "server");
    if (ckpt.model_kind == "early_exit") {
        m.ee_head = LinearHead{detail::take_tensor(ckpt, "ee.w"), detail::take_tensor(ckpt, "ee.b")};
    }
    m.channel = std::move(channel);
    m.validate();
    return m;
}

inline HetSplitModel het_model_from_checkpoint(const Checkpoint& ckpt, ChannelConfig channel) {
    if (ckpt.model_kind != "heterogeneous") {
        throw std::runtime_error("checkpoint: kind '" + ckpt.model_kind + "' is not heterogeneous");
    }
    HetSplitModel m;
    for (std::size_t i = 0;; ++i) {
        if (!detail::has_tensor(ckpt, "edge" + std::to_string(i) + ".l0.w_ih")) break;
        m.edges.push_back(detail::read_stack(ckpt, "edge" + std::to_string(i)));
    }
    m.server = detail::read_stack(ckpt, "server");
    m.channel = std::move(channel);
    m.validate();
    return m;
}

}  // namespace comsplit
