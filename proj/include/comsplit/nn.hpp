#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "comsplit/rng.hpp"
#include "comsplit/tensor.hpp"

namespace comsplit {

// Gate weights for one LSTM layer. Rows are ordered (input, forget,
// cell-candidate, output), 4H rows total.
struct LstmLayerParams {
    Tensor w_ih;  // [4H x D]
    Tensor w_hh;  // [4H x H]
    Tensor bias;  // [4H]

    std::size_t hidden_size() const { return w_hh.shape()[1]; }
    std::size_t input_size() const { return w_ih.shape()[1]; }
};

struct LinearHead {
    Tensor w;  // [1 x K]
    Tensor b;  // [1]

    std::size_t input_size() const { return w.shape()[1]; }
};

// Stack of LSTM layers with an optional final linear head.
struct LstmStackParams {
    std::vector<LstmLayerParams> layers;
    std::optional<LinearHead> fc;

    std::size_t hidden_size() const { return layers.back().hidden_size(); }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (const auto& l : layers) {
            out.push_back(l.w_ih);
            out.push_back(l.w_hh);
            out.push_back(l.bias);
        }
        if (fc) {
            out.push_back(fc->w);
            out.push_back(fc->b);
        }
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const Tensor& t : parameters()) n += t.numel();
        return n;
    }
};

namespace detail {

inline Tensor uniform_tensor(Shape shape, double bound, Rng& rng, bool requires_grad) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.uniform(-bound, bound);
    return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace detail

inline LstmLayerParams init_lstm_layer(std::size_t input, std::size_t hidden, Rng& rng) {
    if (input == 0 || hidden == 0) {
        throw ContractError("init_lstm_layer: sizes must be positive");
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    LstmLayerParams p;
    p.w_ih = detail::uniform_tensor({4 * hidden, input}, bound, rng, true);
    p.w_hh = detail::uniform_tensor({4 * hidden, hidden}, bound, rng, true);
    p.bias = detail::uniform_tensor({4 * hidden}, bound, rng, true);
    return p;
}

inline LinearHead init_linear_head(std::size_t input, Rng& rng) {
    if (input == 0) throw ContractError("init_linear_head: size must be positive");
    const double bound = 1.0 / std::sqrt(static_cast<double>(input));
    LinearHead h;
    h.w = detail::uniform_tensor({1, input}, bound, rng, true);
    h.b = detail::uniform_tensor({1}, bound, rng, true);
    return h;
}

// Stack with layer hidden sizes `hidden_sizes`, first-layer input width
// `input_size`, and (optionally) a scalar linear head on the last layer.
// All values drawn i.i.d. uniform on [-1/sqrt(H), 1/sqrt(H)].
inline LstmStackParams init_params(std::size_t input_size,
                                   const std::vector<std::size_t>& hidden_sizes,
                                   bool with_fc, std::uint64_t seed) {
    if (hidden_sizes.empty()) throw ContractError("init_params: no layers");
    Rng rng(seed);
    LstmStackParams stack;
    std::size_t d = input_size;
    for (std::size_t h : hidden_sizes) {
        stack.layers.push_back(init_lstm_layer(d, h, rng));
        d = h;
    }
    if (with_fc) stack.fc = init_linear_head(d, rng);
    return stack;
}

// One LSTM step over a batch: x_t [B x D], h_prev/c_prev [B x H].
// Gates: i = sigma(.), f = sigma(.), g = tanh(.), o = sigma(.);
// c_t = f (.) c_prev + i (.) g;  h_t = o (.) tanh(c_t).
inline std::pair<Tensor, Tensor> lstm_cell(const Tensor& x_t, const Tensor& h_prev,
                                           const Tensor& c_prev, const LstmLayerParams& p) {
    const std::size_t h = p.hidden_size();
    if (x_t.rank() != 2 || x_t.shape()[1] != p.input_size()) {
        throw ShapeError("lstm_cell: input " + detail::shape_str(x_t.shape()) +
                         " vs weight " + detail::shape_str(p.w_ih.shape()));
    }
    if (h_prev.shape() != Shape{x_t.shape()[0], h} || c_prev.shape() != h_prev.shape()) {
        throw ShapeError("lstm_cell: state " + detail::shape_str(h_prev.shape()) +
                         " for hidden size " + std::to_string(h));
    }
    Tensor gates = add(linear(x_t, p.w_ih, p.bias), linear(h_prev, p.w_hh));
    Tensor gi = sigmoid(slice_cols(gates, 0, h));
    Tensor gf = sigmoid(slice_cols(gates, h, 2 * h));
    Tensor gg = tanh(slice_cols(gates, 2 * h, 3 * h));
    Tensor go = sigmoid(slice_cols(gates, 3 * h, 4 * h));
    Tensor c_t = add(mul(gf, c_prev), mul(gi, gg));
    Tensor h_t = mul(go, tanh(c_t));
    return {h_t, c_t};
}

// Per-layer hidden sequences plus final states, for resumable iteration.
struct StackState {
    std::vector<Tensor> h;  // per layer, [B x H]
    std::vector<Tensor> c;
};

struct StackTrace {
    std::vector<std::vector<Tensor>> hidden_seq;  // [layer][t] -> [B x H]
    StackState final_state;

    const Tensor& final_hidden(std::size_t layer) const { return final_state.h[layer]; }
};

inline StackState zero_state(const std::vector<LstmLayerParams>& layers, std::size_t batch) {
    StackState s;
    for (const auto& l : layers) {
        s.h.push_back(Tensor::zeros({batch, l.hidden_size()}));
        s.c.push_back(Tensor::zeros({batch, l.hidden_size()}));
    }
    return s;
}

// Runs the stack over a sequence of [B x D] steps. Layer l consumes the
// hidden sequence of layer l-1. Passing the returned final_state back in
// continues the same sequence, so chunked and whole-sequence iteration agree.
inline StackTrace lstm_stack_forward(const std::vector<Tensor>& seq,
                                     const std::vector<LstmLayerParams>& layers,
                                     const StackState* initial = nullptr) {
    if (seq.empty()) throw ContractError("lstm_stack_forward: empty sequence");
    if (layers.empty()) throw ContractError("lstm_stack_forward: no layers");
    const std::size_t batch = seq[0].shape()[0];
    StackTrace trace;
    trace.hidden_seq.resize(layers.size());
    StackState state = initial ? *initial : zero_state(layers, batch);

    std::vector<Tensor> input = seq;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        Tensor h = state.h[l];
        Tensor c = state.c[l];
        for (const Tensor& x_t : input) {
            auto [h_next, c_next] = lstm_cell(x_t, h, c, layers[l]);
            h = h_next;
            c = c_next;
            trace.hidden_seq[l].push_back(h);
        }
        state.h[l] = h;
        state.c[l] = c;
        input = trace.hidden_seq[l];
    }
    trace.final_state = std::move(state);
    return trace;
}

inline Tensor fc_forward(const Tensor& h, const LinearHead& head) {
    return linear(h, head.w, head.b);
}

// ---------------------------------------------------------------------------
// Checkpoint serialization (binary, bitwise round-trip)
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::string model_kind;
    std::vector<std::pair<std::string, Tensor>> tensors;
};

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}

inline std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}

inline std::string read_string(std::istream& is) {
    std::string s(read_u64(is), '\0');
    is.read(s.data(), static_cast<std::streamsize>(s.size()));
    return s;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
    os.write("CSPK", 4);
    detail::write_u32(os, kCheckpointVersion);
    detail::write_string(os, ckpt.model_kind);
    detail::write_u64(os, ckpt.tensors.size());
    for (const auto& [name, t] : ckpt.tensors) {
        detail::write_string(os, name);
        detail::write_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) detail::write_u64(os, d);
        os.write(reinterpret_cast<const char*>(t.values().data()),
                 static_cast<std::streamsize>(t.numel() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "CSPK", 4) != 0) {
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    }
    const std::uint32_t version = detail::read_u32(is);
    if (version != kCheckpointVersion) {
        throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(version));
    }
    Checkpoint ckpt;
    ckpt.model_kind = detail::read_string(is);
    const std::uint64_t count = detail::read_u64(is);
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name = detail::read_string(is);
        const std::uint32_t rank = detail::read_u32(is);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(detail::read_u64(is));
        std::vector<double> values(detail::shape_numel(shape));
        is.read(reinterpret_cast<char*>(values.data()),
                static_cast<std::streamsize>(values.size() * sizeof(double)));
        ckpt.tensors.emplace_back(std::move(name),
                                  Tensor::from(std::move(shape), std::move(values), true));
    }
    if (!is) throw std::runtime_error("load_checkpoint: truncated file " + path);
    return ckpt;
}

}  // namespace comsplit
