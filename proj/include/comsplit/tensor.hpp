#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace comsplit {

// Dimension mismatch between operands.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Violated operation precondition (bad argument value, empty input, ...).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

using Shape = std::vector<std::size_t>;

namespace detail {

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// RAII guard disabling graph construction (evaluation-only forwards).
struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

struct TensorImpl;
struct BackwardCtx;

struct GraphNode {
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(const std::vector<double>&, BackwardCtx&)> backprop;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::vector<double> grad;  // persistent accumulator, empty until first backward
    std::shared_ptr<GraphNode> node;

    std::size_t numel() const { return values.size(); }
};

// Per-backward-call vector-Jacobian buffers. Persistent Tensor::grad arrays
// receive exactly one contribution per backward() call, so calling backward
// twice without zeroing doubles every gradient.
struct BackwardCtx {
    std::unordered_map<TensorImpl*, std::vector<double>> vjp;

    // Transient gradient buffer for `t`, or nullptr when nothing upstream of
    // `t` requires gradients (dead path, skipped by op closures).
    std::vector<double>* buf(TensorImpl* t) {
        if (!t->requires_grad) return nullptr;
        auto& v = vjp[t];
        if (v.empty()) v.assign(t->numel(), 0.0);
        return &v;
    }
};

// Dense real tensor handle participating in a define-by-run reverse-mode
// differentiation graph. Copying a Tensor copies the handle, not the storage.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return of(std::move(shape), requires_grad, 0.0);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        return of(std::move(shape), requires_grad, value);
    }

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        const std::size_t n = detail::shape_numel(shape);
        if (values.size() != n) {
            throw ShapeError("Tensor: " + std::to_string(values.size()) +
                             " values for shape " + detail::shape_str(shape));
        }
        for (std::size_t d : shape) {
            if (d == 0) throw ContractError("Tensor: zero dimension in shape " + detail::shape_str(shape));
        }
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl>();
        t.impl_->shape = std::move(shape);
        t.impl_->values = std::move(values);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->values.size(); }

    std::size_t rows() const { return rank() == 2 ? impl_->shape[0] : 1; }
    std::size_t cols() const { return rank() == 2 ? impl_->shape[1] : impl_->shape[0]; }

    std::vector<double>& values() { return impl_->values; }
    const std::vector<double>& values() const { return impl_->values; }

    double& at(std::size_t i) { return impl_->values[i]; }
    double at(std::size_t i) const { return impl_->values[i]; }
    double& at(std::size_t r, std::size_t c) { return impl_->values[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return impl_->values[r * cols() + c]; }

    double item() const {
        if (numel() != 1) {
            throw ContractError("Tensor::item: tensor has " + std::to_string(numel()) + " elements");
        }
        return impl_->values[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::vector<double>& grad() { return impl_->grad; }
    const std::vector<double>& grad() const { return impl_->grad; }

    void zero_grad() { impl_->grad.assign(numel(), 0.0); }
    void drop_grad() { impl_->grad.clear(); }

    // Value copy detached from any graph.
    Tensor clone_detached() const {
        return from(impl_->shape, impl_->values, impl_->requires_grad);
    }

    const std::shared_ptr<TensorImpl>& ptr() const { return impl_; }

private:
    static Tensor of(Shape shape, bool requires_grad, double fill) {
        const std::size_t n = detail::shape_numel(shape);
        return from(std::move(shape), std::vector<double>(n, fill), requires_grad);
    }

    std::shared_ptr<TensorImpl> impl_;
};

namespace detail {

inline Tensor make_result(Shape shape, std::vector<double> values,
                          std::vector<Tensor> parents,
                          std::function<void(const std::vector<double>&, BackwardCtx&)> backprop) {
    bool needs_grad = false;
    for (const Tensor& p : parents) needs_grad = needs_grad || p.requires_grad();
    Tensor out = Tensor::from(std::move(shape), std::move(values), needs_grad && grad_enabled());
    if (out.requires_grad()) {
        auto node = std::make_shared<GraphNode>();
        node->parents.reserve(parents.size());
        for (const Tensor& p : parents) node->parents.push_back(p.ptr());
        node->backprop = std::move(backprop);
        out.ptr()->node = std::move(node);
    }
    return out;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise operations
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
    auto pa = a.ptr();
    auto pb = b.ptr();
    return detail::make_result(a.shape(), std::move(out), {a, b},
        [pa, pb](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* ga = ctx.buf(pa.get()))
                for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
            if (auto* gb = ctx.buf(pb.get()))
                for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
    auto pa = a.ptr();
    auto pb = b.ptr();
    return detail::make_result(a.shape(), std::move(out), {a, b},
        [pa, pb](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* ga = ctx.buf(pa.get()))
                for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
            if (auto* gb = ctx.buf(pb.get()))
                for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
        });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
    auto pa = a.ptr();
    auto pb = b.ptr();
    return detail::make_result(a.shape(), std::move(out), {a, b},
        [pa, pb](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* ga = ctx.buf(pa.get()))
                for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * pb->values[i];
            if (auto* gb = ctx.buf(pb.get()))
                for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * pa->values[i];
        });
}

inline Tensor tanh(const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.at(i));
    auto px = x.ptr();
    auto saved = out;  // d tanh = 1 - tanh^2
    return detail::make_result(x.shape(), std::move(out), {x},
        [px, saved = std::move(saved)](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* gx = ctx.buf(px.get()))
                for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * (1.0 - saved[i] * saved[i]);
        });
}

inline Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x.at(i)));
    auto px = x.ptr();
    auto saved = out;  // d sigmoid = s(1-s)
    return detail::make_result(x.shape(), std::move(out), {x},
        [px, saved = std::move(saved)](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* gx = ctx.buf(px.get()))
                for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * saved[i] * (1.0 - saved[i]);
        });
}

inline Tensor square(const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) * x.at(i);
    auto px = x.ptr();
    return detail::make_result(x.shape(), std::move(out), {x},
        [px](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* gx = ctx.buf(px.get()))
                for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * 2.0 * px->values[i];
        });
}

inline Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x.at(i);
    auto px = x.ptr();
    return detail::make_result(x.shape(), std::move(out), {x},
        [px, c](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* gx = ctx.buf(px.get()))
                for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += c * g[i];
        });
}

// Elementwise product with a constant mask (channel erasures). The mask is
// data, not a graph parent; backward is g ⊙ mask.
inline Tensor mul_mask(const Tensor& x, std::vector<double> mask) {
    if (mask.size() != x.numel()) {
        throw ShapeError("mul_mask: mask size " + std::to_string(mask.size()) +
                         " vs tensor " + detail::shape_str(x.shape()));
    }
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) * mask[i];
    auto px = x.ptr();
    return detail::make_result(x.shape(), std::move(out), {x},
        [px, mask = std::move(mask)](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* gx = ctx.buf(px.get()))
                for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * mask[i];
        });
}

// Addition of a constant offset (channel noise); backward is the identity.
inline Tensor add_offset(const Tensor& x, const std::vector<double>& offset) {
    if (offset.size() != x.numel()) {
        throw ShapeError("add_offset: offset size " + std::to_string(offset.size()) +
                         " vs tensor " + detail::shape_str(x.shape()));
    }
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) + offset[i];
    auto px = x.ptr();
    return detail::make_result(x.shape(), std::move(out), {x},
        [px](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* gx = ctx.buf(px.get()))
                for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
        });
}

// ---------------------------------------------------------------------------
// Matrix operations
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
        throw ShapeError("matmul: incompatible shapes " + detail::shape_str(a.shape()) +
                         " and " + detail::shape_str(b.shape()));
    }
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(m * n, 0.0);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t t = 0; t < k; ++t) {
            const double s = av[i * k + t];
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += s * bv[t * n + j];
        }
    auto pa = a.ptr();
    auto pb = b.ptr();
    return detail::make_result({m, n}, std::move(out), {a, b},
        [pa, pb, m, k, n](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* ga = ctx.buf(pa.get())) {  // dL/da = g . b^T
                const auto& bv = pb->values;
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t t = 0; t < k; ++t) {
                        double s = 0.0;
                        for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[t * n + j];
                        (*ga)[i * k + t] += s;
                    }
            }
            if (auto* gb = ctx.buf(pb.get())) {  // dL/db = a^T . g
                const auto& av = pa->values;
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t t = 0; t < k; ++t) {
                        const double s = av[i * k + t];
                        for (std::size_t j = 0; j < n; ++j) (*gb)[t * n + j] += s * g[i * n + j];
                    }
            }
        });
}

// y = x . W^T (+ bias), the row-major friendly affine map: x is [B x D],
// W is [K x D], bias (optional, rank 1) is [K], result [B x K]. Each output
// element accumulates bias first, then the D products in index order.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {}) {
    if (x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1]) {
        throw ShapeError("linear: input " + detail::shape_str(x.shape()) +
                         " incompatible with weight " + detail::shape_str(w.shape()));
    }
    const std::size_t b = x.shape()[0], d = x.shape()[1], k = w.shape()[0];
    if (bias.defined() && (bias.rank() != 1 || bias.shape()[0] != k)) {
        throw ShapeError("linear: bias " + detail::shape_str(bias.shape()) +
                         " incompatible with weight " + detail::shape_str(w.shape()));
    }
    std::vector<double> out(b * k);
    const auto& xv = x.values();
    const auto& wv = w.values();
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t r = 0; r < k; ++r) {
            double s = bias.defined() ? bias.at(r) : 0.0;
            const double* xr = &xv[i * d];
            const double* wr = &wv[r * d];
            for (std::size_t t = 0; t < d; ++t) s += xr[t] * wr[t];
            out[i * k + r] = s;
        }
    auto px = x.ptr();
    auto pw = w.ptr();
    std::vector<Tensor> parents{x, w};
    std::shared_ptr<TensorImpl> pbias;
    if (bias.defined()) {
        parents.push_back(bias);
        pbias = bias.ptr();
    }
    return detail::make_result({b, k}, std::move(out), std::move(parents),
        [px, pw, pbias, b, d, k](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* gx = ctx.buf(px.get())) {
                const auto& wv = pw->values;
                for (std::size_t i = 0; i < b; ++i)
                    for (std::size_t r = 0; r < k; ++r) {
                        const double gv = g[i * k + r];
                        const double* wr = &wv[r * d];
                        double* gxr = &(*gx)[i * d];
                        for (std::size_t t = 0; t < d; ++t) gxr[t] += gv * wr[t];
                    }
            }
            if (auto* gw = ctx.buf(pw.get())) {
                const auto& xv = px->values;
                for (std::size_t i = 0; i < b; ++i)
                    for (std::size_t r = 0; r < k; ++r) {
                        const double gv = g[i * k + r];
                        const double* xr = &xv[i * d];
                        double* gwr = &(*gw)[r * d];
                        for (std::size_t t = 0; t < d; ++t) gwr[t] += gv * xr[t];
                    }
            }
            if (pbias) {
                if (auto* gb = ctx.buf(pbias.get())) {
                    for (std::size_t i = 0; i < b; ++i)
                        for (std::size_t r = 0; r < k; ++r) (*gb)[r] += g[i * k + r];
                }
            }
        });
}

// Explicit bias-row broadcast: adds a rank-1 bias to every row of x.
inline Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
    if (x.rank() != 2 || bias.rank() != 1 || bias.shape()[0] != x.shape()[1]) {
        throw ShapeError("add_rowwise: " + detail::shape_str(x.shape()) + " and " +
                         detail::shape_str(bias.shape()));
    }
    const std::size_t b = x.shape()[0], k = x.shape()[1];
    std::vector<double> out(b * k);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < k; ++j) out[i * k + j] = x.at(i, j) + bias.at(j);
    auto px = x.ptr();
    auto pb = bias.ptr();
    return detail::make_result({b, k}, std::move(out), {x, bias},
        [px, pb, b, k](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* gx = ctx.buf(px.get()))
                for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
            if (auto* gb = ctx.buf(pb.get()))
                for (std::size_t i = 0; i < b; ++i)
                    for (std::size_t j = 0; j < k; ++j) (*gb)[j] += g[i * k + j];
        });
}

// Columns [c0, c1) of a [B x K] tensor; backward scatters into that range.
inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
    if (x.rank() != 2 || c0 >= c1 || c1 > x.shape()[1]) {
        throw ShapeError("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") of " + detail::shape_str(x.shape()));
    }
    const std::size_t b = x.shape()[0], k = x.shape()[1], w = c1 - c0;
    std::vector<double> out(b * w);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x.at(i, c0 + j);
    auto px = x.ptr();
    return detail::make_result({b, w}, std::move(out), {x},
        [px, b, k, w, c0](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* gx = ctx.buf(px.get()))
                for (std::size_t i = 0; i < b; ++i)
                    for (std::size_t j = 0; j < w; ++j) (*gx)[i * k + c0 + j] += g[i * w + j];
        });
}

// ---------------------------------------------------------------------------
// Reductions and concatenation
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) s += x.at(i);
    auto px = x.ptr();
    return detail::make_result({1}, {s}, {x},
        [px](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* gx = ctx.buf(px.get()))
                for (double& v : *gx) v += g[0];
        });
}

inline Tensor mean(const Tensor& x) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) s += x.at(i);
    const double inv = 1.0 / static_cast<double>(x.numel());
    auto px = x.ptr();
    return detail::make_result({1}, {s * inv}, {x},
        [px, inv](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* gx = ctx.buf(px.get()))
                for (double& v : *gx) v += g[0] * inv;
        });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ContractError("concat: no tensors");
    const std::size_t rank = parts[0].rank();
    if (axis >= rank) throw ShapeError("concat: axis " + std::to_string(axis) +
                                       " for rank " + std::to_string(rank));
    for (const Tensor& t : parts) {
        if (t.rank() != rank) {
            throw ShapeError("concat: mixed ranks " + detail::shape_str(parts[0].shape()) +
                             " vs " + detail::shape_str(t.shape()));
        }
        for (std::size_t d = 0; d < rank; ++d) {
            if (d != axis && t.shape()[d] != parts[0].shape()[d]) {
                throw ShapeError("concat: incompatible shapes " + detail::shape_str(parts[0].shape()) +
                                 " vs " + detail::shape_str(t.shape()));
            }
        }
    }
    Shape out_shape = parts[0].shape();
    out_shape[axis] = 0;
    for (const Tensor& t : parts) out_shape[axis] += t.shape()[axis];

    std::vector<double> out(detail::shape_numel(out_shape));
    // Copy via (outer, axis, inner) blocks; rank <= 2 in practice.
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= out_shape[d];
    for (std::size_t d = axis + 1; d < rank; ++d) inner *= out_shape[d];
    std::vector<std::size_t> offsets;  // start along axis per part
    {
        std::size_t off = 0;
        for (const Tensor& t : parts) {
            offsets.push_back(off);
            const std::size_t len = t.shape()[axis];
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t a = 0; a < len; ++a) {
                    const double* src = &t.values()[(o * len + a) * inner];
                    double* dst = &out[(o * out_shape[axis] + off + a) * inner];
                    for (std::size_t i = 0; i < inner; ++i) dst[i] = src[i];
                }
            }
            off += len;
        }
    }
    std::vector<std::shared_ptr<TensorImpl>> impls;
    for (const Tensor& t : parts) impls.push_back(t.ptr());
    const std::size_t axis_total = out_shape[axis];
    return detail::make_result(out_shape, std::move(out), parts,
        [impls, offsets, outer, inner, axis_total, axis](const std::vector<double>& g, BackwardCtx& ctx) {
            for (std::size_t p = 0; p < impls.size(); ++p) {
                auto* gp = ctx.buf(impls[p].get());
                if (!gp) continue;
                const std::size_t len = impls[p]->shape[axis];
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t a = 0; a < len; ++a) {
                        const double* src = &g[(o * axis_total + offsets[p] + a) * inner];
                        double* dst = &(*gp)[(o * len + a) * inner];
                        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                    }
            }
        });
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Every reachable requires_grad tensor
// receives one accumulation into its persistent grad array.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be scalar, got " +
                            detail::shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
        // No parameters anywhere below; nothing to populate.
        return;
    }

    // Iterative post-order DFS; only subgraphs that require gradients matter.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> seen;
    struct Frame {
        TensorImpl* t;
        std::size_t next = 0;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.ptr().get()});
    seen.insert(loss.ptr().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        TensorImpl* t = f.t;
        const std::size_t nparents = t->node ? t->node->parents.size() : 0;
        bool descended = false;
        while (f.next < nparents) {
            TensorImpl* p = t->node->parents[f.next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p});
                descended = true;
                break;
            }
        }
        if (!descended && f.next >= nparents) {
            order.push_back(t);
            stack.pop_back();
        }
    }

    BackwardCtx ctx;
    ctx.vjp[loss.ptr().get()] = {1.0};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* t = *it;
        auto found = ctx.vjp.find(t);
        if (found == ctx.vjp.end() || !t->node) continue;
        t->node->backprop(found->second, ctx);
    }
    for (TensorImpl* t : order) {
        if (!t->requires_grad) continue;
        auto found = ctx.vjp.find(t);
        if (found == ctx.vjp.end()) continue;
        if (t->grad.empty()) t->grad.assign(t->numel(), 0.0);
        for (std::size_t i = 0; i < t->grad.size(); ++i) t->grad[i] += found->second[i];
    }
}

inline void zero_grads(const std::vector<Tensor>& params) {
    for (Tensor p : params) p.zero_grad();
}

}  // namespace comsplit
