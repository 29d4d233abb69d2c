// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "csimae/core/tensor.hpp"

namespace csimae {

// ---------------------------------------------------------------------------
// Grad mode. When disabled, ops produce plain values: no parents, no closures,
// nothing to traverse. Inference paths run under NoGradGuard.
// ---------------------------------------------------------------------------

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// ---------------------------------------------------------------------------
// Graph node. Edges point from a result to its operands, so a forward pass
// builds the tape implicitly and backward() walks it in reverse topological
// order. Each sample's graph is private to the thread that built it.
// ---------------------------------------------------------------------------

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool track = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const Tensor<T>&)> backprop;

    void accumulate(const Tensor<T>& g) {
        if (!has_grad) {
            grad = g;
            has_grad = true;
            return;
        }
        T* dst = grad.raw();
        const T* src = g.raw();
        const std::size_t n = grad.numel();
        for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
    }
};

/// Value-with-gradient handle participating in reverse-mode differentiation.
template <typename T>
class Var {
public:
    Var() = default;

    explicit Var(Tensor<T> value, bool requires_grad = false)
        : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->track = requires_grad && grad_mode_flag();
    }

    static Var leaf(Tensor<T> value) { return Var(std::move(value), false); }
    static Var param(Tensor<T> value) {
        Var v;
        v.node_ = std::make_shared<Node<T>>();
        v.node_->value = std::move(value);
        v.node_->track = true;  // parameters stay tracked even if created under no-grad
        return v;
    }

    bool defined() const { return node_ != nullptr; }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t numel() const { return node_->value.numel(); }
    bool tracked() const { return node_ && node_->track; }

    bool has_grad() const { return node_->has_grad; }
    const Tensor<T>& grad() const {
        if (!node_->has_grad) throw std::runtime_error("grad: no gradient has been accumulated");
        return node_->grad;
    }
    void zero_grad() {
        node_->has_grad = false;
        node_->grad = Tensor<T>();
    }

    std::shared_ptr<Node<T>>& node() { return node_; }
    const std::shared_ptr<Node<T>>& node() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T, typename... Vars>
bool any_tracked(const Vars&... vs) {
    return grad_mode_flag() && (... || vs.tracked());
}

/// Wrap a freshly computed tensor; record parents/backprop only when needed.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<std::shared_ptr<Node<T>>> parents,
                   std::function<void(const Tensor<T>&)> backprop) {
    Var<T> out(std::move(value), false);
    out.node()->track = true;
    out.node()->parents = std::move(parents);
    out.node()->backprop = std::move(backprop);
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Broadcasting helpers (NumPy alignment rules).
// ---------------------------------------------------------------------------

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw std::invalid_argument("broadcast: incompatible shapes " + shape_str(a) + " and " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

namespace detail {

/// Strides of `s` viewed as the broadcast shape `out` (0 on broadcast axes).
inline std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
    std::vector<std::size_t> st(out.size(), 0);
    const auto own = row_major_strides(s);
    const std::size_t shift = out.size() - s.size();
    for (std::size_t i = 0; i < s.size(); ++i)
        st[shift + i] = (s[i] == 1 && out[shift + i] != 1) ? 0 : own[i];
    return st;
}

template <typename T, class F>
Tensor<T> bc_binary(const Tensor<T>& a, const Tensor<T>& b, F f) {
    if (a.shape() == b.shape()) {
        Tensor<T> out(a.shape());
        const T* pa = a.raw();
        const T* pb = b.raw();
        T* po = out.raw();
        const std::size_t n = out.numel();
        for (std::size_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
        return out;
    }
    if (b.numel() == 1) {
        Tensor<T> out(a.shape());
        const T* pa = a.raw();
        const T bv = b[0];
        T* po = out.raw();
        for (std::size_t i = 0; i < out.numel(); ++i) po[i] = f(pa[i], bv);
        return out;
    }
    if (a.numel() == 1) {
        Tensor<T> out(b.shape());
        const T av = a[0];
        const T* pb = b.raw();
        T* po = out.raw();
        for (std::size_t i = 0; i < out.numel(); ++i) po[i] = f(av, pb[i]);
        return out;
    }
    const Shape os = broadcast_shape(a.shape(), b.shape());
    Tensor<T> out(os);
    const auto sa = broadcast_strides(a.shape(), os);
    const auto sb = broadcast_strides(b.shape(), os);
    std::vector<std::size_t> idx(os.size(), 0);
    const T* pa = a.raw();
    const T* pb = b.raw();
    T* po = out.raw();
    std::size_t ia = 0, ib = 0;
    const std::size_t n = out.numel();
    for (std::size_t flat = 0; flat < n; ++flat) {
        po[flat] = f(pa[ia], pb[ib]);
        for (std::size_t ax = os.size(); ax-- > 0;) {
            ++idx[ax];
            ia += sa[ax];
            ib += sb[ax];
            if (idx[ax] < os[ax]) break;
            ia -= sa[ax] * os[ax];
            ib -= sb[ax] * os[ax];
            idx[ax] = 0;
        }
    }
    return out;
}

/// Sum `g` down to `target` (inverse of broadcasting to g's shape).
template <typename T>
Tensor<T> reduce_to_shape(const Tensor<T>& g, const Shape& target) {
    if (g.shape() == target) return g;
    Tensor<T> out(target);
    const auto st = broadcast_strides(target, g.shape());
    std::vector<std::size_t> idx(g.rank(), 0);
    const T* pg = g.raw();
    T* po = out.raw();
    std::size_t io = 0;
    const std::size_t n = g.numel();
    for (std::size_t flat = 0; flat < n; ++flat) {
        po[io] += pg[flat];
        for (std::size_t ax = g.rank(); ax-- > 0;) {
            ++idx[ax];
            io += st[ax];
            if (idx[ax] < g.shape()[ax]) break;
            io -= st[ax] * g.shape()[ax];
            idx[ax] = 0;
        }
    }
    return out;
}

template <typename T, class F>
Tensor<T> map_unary(const Tensor<T>& a, F f) {
    Tensor<T> out(a.shape());
    const T* pa = a.raw();
    T* po = out.raw();
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) po[i] = f(pa[i]);
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    Tensor<T> v = detail::bc_binary(a.value(), b.value(), [](T x, T y) { return x + y; });
    if (!detail::any_tracked<T>(a, b)) return Var<T>::leaf(std::move(v));
    auto an = a.node(), bn = b.node();
    const Shape as = a.shape(), bs = b.shape();
    return detail::make_result<T>(std::move(v), {an, bn}, [an, bn, as, bs](const Tensor<T>& g) {
        if (an->track) an->accumulate(detail::reduce_to_shape(g, as));
        if (bn->track) bn->accumulate(detail::reduce_to_shape(g, bs));
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    Tensor<T> v = detail::bc_binary(a.value(), b.value(), [](T x, T y) { return x - y; });
    if (!detail::any_tracked<T>(a, b)) return Var<T>::leaf(std::move(v));
    auto an = a.node(), bn = b.node();
    const Shape as = a.shape(), bs = b.shape();
    return detail::make_result<T>(std::move(v), {an, bn}, [an, bn, as, bs](const Tensor<T>& g) {
        if (an->track) an->accumulate(detail::reduce_to_shape(g, as));
        if (bn->track) {
            Tensor<T> neg = detail::map_unary(g, [](T x) { return -x; });
            bn->accumulate(detail::reduce_to_shape(neg, bs));
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    Tensor<T> v = detail::bc_binary(a.value(), b.value(), [](T x, T y) { return x * y; });
    if (!detail::any_tracked<T>(a, b)) return Var<T>::leaf(std::move(v));
    auto an = a.node(), bn = b.node();
    const Shape as = a.shape(), bs = b.shape();
    return detail::make_result<T>(std::move(v), {an, bn}, [an, bn, as, bs](const Tensor<T>& g) {
        if (an->track) {
            Tensor<T> ga = detail::bc_binary(g, bn->value, [](T x, T y) { return x * y; });
            an->accumulate(detail::reduce_to_shape(ga, as));
        }
        if (bn->track) {
            Tensor<T> gb = detail::bc_binary(g, an->value, [](T x, T y) { return x * y; });
            bn->accumulate(detail::reduce_to_shape(gb, bs));
        }
    });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
    Tensor<T> v = detail::bc_binary(a.value(), b.value(), [](T x, T y) { return x / y; });
    if (!detail::any_tracked<T>(a, b)) return Var<T>::leaf(std::move(v));
    auto an = a.node(), bn = b.node();
    const Shape as = a.shape(), bs = b.shape();
    return detail::make_result<T>(std::move(v), {an, bn}, [an, bn, as, bs](const Tensor<T>& g) {
        if (an->track) {
            Tensor<T> ga = detail::bc_binary(g, bn->value, [](T x, T y) { return x / y; });
            an->accumulate(detail::reduce_to_shape(ga, as));
        }
        if (bn->track) {
            // d/db (a/b) = -a / b^2
            Tensor<T> q = detail::bc_binary(an->value, bn->value, [](T x, T y) { return -x / (y * y); });
            Tensor<T> gb = detail::bc_binary(g, q, [](T x, T y) { return x * y; });
            bn->accumulate(detail::reduce_to_shape(gb, bs));
        }
    });
}

template <typename T>
Var<T> mul_scalar(const Var<T>& a, T s) {
    Tensor<T> v = detail::map_unary(a.value(), [s](T x) { return x * s; });
    if (!detail::any_tracked<T>(a)) return Var<T>::leaf(std::move(v));
    auto an = a.node();
    return detail::make_result<T>(std::move(v), {an}, [an, s](const Tensor<T>& g) {
        an->accumulate(detail::map_unary(g, [s](T x) { return x * s; }));
    });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
    Tensor<T> v = detail::map_unary(a.value(), [s](T x) { return x + s; });
    if (!detail::any_tracked<T>(a)) return Var<T>::leaf(std::move(v));
    auto an = a.node();
    return detail::make_result<T>(std::move(v), {an},
                                  [an](const Tensor<T>& g) { an->accumulate(g); });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
    return mul_scalar(a, T(-1));
}

namespace detail {

template <typename T, class Fwd, class Bwd>
Var<T> unary_op(const Var<T>& a, Fwd f, Bwd dfdx_from_in_out) {
    Tensor<T> v = map_unary(a.value(), f);
    if (!any_tracked<T>(a)) return Var<T>::leaf(std::move(v));
    auto an = a.node();
    Tensor<T> out_copy = v;  // many derivatives are cheapest in terms of the output
    return make_result<T>(std::move(v), {an}, [an, out_copy, dfdx_from_in_out](const Tensor<T>& g) {
        Tensor<T> gx(g.shape());
        const T* pg = g.raw();
        const T* pin = an->value.raw();
        const T* pout = out_copy.raw();
        T* po = gx.raw();
        const std::size_t n = g.numel();
        for (std::size_t i = 0; i < n; ++i) po[i] = pg[i] * dfdx_from_in_out(pin[i], pout[i]);
        an->accumulate(gx);
    });
}

}  // namespace detail

template <typename T>
Var<T> exp(const Var<T>& a) {
    return detail::unary_op(
        a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> sqrt(const Var<T>& a) {
    return detail::unary_op(
        a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
}

template <typename T>
T sigmoid_scalar(T x) {
    return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
    return detail::unary_op(
        a, [](T x) { return sigmoid_scalar(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
    return detail::unary_op(
        a, [](T x) { return x * sigmoid_scalar(x); },
        [](T x, T) {
            const T s = sigmoid_scalar(x);
            return s * (T(1) + x * (T(1) - s));
        });
}

template <typename T>
T softplus_scalar(T x) {
    return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename T>
Var<T> softplus(const Var<T>& a) {
    return detail::unary_op(
        a, [](T x) { return softplus_scalar(x); }, [](T x, T) { return sigmoid_scalar(x); });
}

// ---------------------------------------------------------------------------
// Matrix product with broadcastable batch axes.
// ---------------------------------------------------------------------------

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_acc(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = A + i * k;
        T* crow = C + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            const T a = arow[l];
            const T* brow = B + l * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += a * brow[j];
        }
    }
}

// C[m,k] += G[m,n] * B[k,n]^T
template <typename T>
void gemm_nt_acc(const T* G, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* grow = G + i * n;
        T* crow = C + i * k;
        for (std::size_t l = 0; l < k; ++l) {
            const T* brow = B + l * n;
            T acc = T(0);
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            crow[l] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * G[m,n]
template <typename T>
void gemm_tn_acc(const T* A, const T* G, T* C, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = A + i * k;
        const T* grow = G + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            const T a = arow[l];
            T* crow = C + l * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += a * grow[j];
        }
    }
}

inline Shape batch_of(const Shape& s) { return Shape(s.begin(), s.end() - 2); }

struct MatmulPlan {
    Shape out_shape;
    Shape batch_shape;
    std::size_t m, k, n, batches;
    std::vector<std::size_t> a_off, b_off;  // per-batch element offsets
};

template <typename T>
MatmulPlan matmul_plan(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw std::invalid_argument("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()));
    MatmulPlan p;
    p.m = a.shape()[a.rank() - 2];
    p.k = a.shape()[a.rank() - 1];
    const std::size_t kb = b.shape()[b.rank() - 2];
    p.n = b.shape()[b.rank() - 1];
    if (p.k != kb)
        throw std::invalid_argument("matmul: inner dimensions disagree: lhs " + shape_str(a.shape()) + " rhs " +
                                    shape_str(b.shape()));
    const Shape ab = batch_of(a.shape()), bb = batch_of(b.shape());
    p.batch_shape = broadcast_shape(ab, bb);
    p.batches = shape_numel(p.batch_shape);
    p.out_shape = p.batch_shape;
    p.out_shape.push_back(p.m);
    p.out_shape.push_back(p.n);

    const auto sa = broadcast_strides(ab, p.batch_shape);
    const auto sb = broadcast_strides(bb, p.batch_shape);
    p.a_off.resize(p.batches);
    p.b_off.resize(p.batches);
    std::vector<std::size_t> idx(p.batch_shape.size(), 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t e = 0; e < p.batches; ++e) {
        p.a_off[e] = ia * p.m * p.k;
        p.b_off[e] = ib * p.k * p.n;
        for (std::size_t ax = p.batch_shape.size(); ax-- > 0;) {
            ++idx[ax];
            ia += sa[ax];
            ib += sb[ax];
            if (idx[ax] < p.batch_shape[ax]) break;
            ia -= sa[ax] * p.batch_shape[ax];
            ib -= sb[ax] * p.batch_shape[ax];
            idx[ax] = 0;
        }
    }
    // broadcast_strides counts elements of the *batch* tensor; scale to full offsets
    // (done above by multiplying ia/ib by slab sizes).
    return p;
}

}  // namespace detail

template <typename T>
Tensor<T> matmul_value(const Tensor<T>& a, const Tensor<T>& b) {
    const auto p = detail::matmul_plan(a, b);
    Tensor<T> out(p.out_shape);
    for (std::size_t e = 0; e < p.batches; ++e)
        detail::gemm_acc(a.raw() + p.a_off[e], b.raw() + p.b_off[e], out.raw() + e * p.m * p.n, p.m, p.k, p.n);
    return out;
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    const auto p = detail::matmul_plan(a.value(), b.value());
    Tensor<T> out(p.out_shape);
    for (std::size_t e = 0; e < p.batches; ++e)
        detail::gemm_acc(a.value().raw() + p.a_off[e], b.value().raw() + p.b_off[e], out.raw() + e * p.m * p.n, p.m,
                         p.k, p.n);
    if (!detail::any_tracked<T>(a, b)) return Var<T>::leaf(std::move(out));
    auto an = a.node(), bn = b.node();
    return detail::make_result<T>(std::move(out), {an, bn}, [an, bn, p](const Tensor<T>& g) {
        if (an->track) {
            Tensor<T> da(an->value.shape());
            for (std::size_t e = 0; e < p.batches; ++e)
                detail::gemm_nt_acc(g.raw() + e * p.m * p.n, bn->value.raw() + p.b_off[e], da.raw() + p.a_off[e], p.m,
                                    p.k, p.n);
            an->accumulate(da);
        }
        if (bn->track) {
            Tensor<T> db(bn->value.shape());
            for (std::size_t e = 0; e < p.batches; ++e)
                detail::gemm_tn_acc(an->value.raw() + p.a_off[e], g.raw() + e * p.m * p.n, db.raw() + p.b_off[e], p.m,
                                    p.k, p.n);
            bn->accumulate(db);
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

namespace detail {

struct AxisSpan {
    std::size_t outer, len, inner;
};

inline AxisSpan axis_span(const Shape& s, std::size_t axis) {
    if (axis >= s.size()) throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    AxisSpan sp{1, s[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
    return sp;
}

}  // namespace detail

template <typename T>
Var<T> sum(const Var<T>& a) {
    T acc = T(0);
    for (const T& v : a.value().data()) acc += v;
    Tensor<T> out = Tensor<T>::scalar(acc);
    if (!detail::any_tracked<T>(a)) return Var<T>::leaf(std::move(out));
    auto an = a.node();
    const Shape as = a.shape();
    return detail::make_result<T>(std::move(out), {an}, [an, as](const Tensor<T>& g) {
        an->accumulate(Tensor<T>::full(as, g[0]));
    });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
    const T scale = T(1) / static_cast<T>(a.numel());
    return mul_scalar(sum(a), scale);
}

template <typename T>
Var<T> sum(const Var<T>& a, std::size_t axis, bool keepdim = false) {
    const auto sp = detail::axis_span(a.shape(), axis);
    Shape os = a.shape();
    if (keepdim)
        os[axis] = 1;
    else
        os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
    if (os.empty()) os = {1};
    Tensor<T> out(os);
    const T* pa = a.value().raw();
    T* po = out.raw();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t l = 0; l < sp.len; ++l) {
            const T* src = pa + (o * sp.len + l) * sp.inner;
            T* dst = po + o * sp.inner;
            for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
        }
    if (!detail::any_tracked<T>(a)) return Var<T>::leaf(std::move(out));
    auto an = a.node();
    const Shape as = a.shape();
    return detail::make_result<T>(std::move(out), {an}, [an, as, sp](const Tensor<T>& g) {
        Tensor<T> gx(as);
        const T* pg = g.raw();
        T* po2 = gx.raw();
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t l = 0; l < sp.len; ++l) {
                const T* src = pg + o * sp.inner;
                T* dst = po2 + (o * sp.len + l) * sp.inner;
                for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
            }
        an->accumulate(gx);
    });
}

template <typename T>
Var<T> mean(const Var<T>& a, std::size_t axis, bool keepdim = false) {
    const T scale = T(1) / static_cast<T>(a.shape()[axis]);
    return mul_scalar(sum(a, axis, keepdim), scale);
}

// ---------------------------------------------------------------------------
// Softmax along an axis, stabilized by max subtraction.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> softmax(const Var<T>& a, std::size_t axis) {
    if (!a.value().all_finite()) throw std::invalid_argument("softmax: non-finite input");
    const auto sp = detail::axis_span(a.shape(), axis);
    Tensor<T> out(a.shape());
    const T* pa = a.value().raw();
    T* po = out.raw();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.len * sp.inner + i;
            T mx = pa[base];
            for (std::size_t l = 1; l < sp.len; ++l) mx = std::max(mx, pa[base + l * sp.inner]);
            T denom = T(0);
            for (std::size_t l = 0; l < sp.len; ++l) {
                const T e = std::exp(pa[base + l * sp.inner] - mx);
                po[base + l * sp.inner] = e;
                denom += e;
            }
            for (std::size_t l = 0; l < sp.len; ++l) po[base + l * sp.inner] /= denom;
        }
    if (!detail::any_tracked<T>(a)) return Var<T>::leaf(std::move(out));
    auto an = a.node();
    Tensor<T> y = out;
    return detail::make_result<T>(std::move(out), {an}, [an, y, sp](const Tensor<T>& g) {
        // dx = y * (g - sum(g*y, axis))
        Tensor<T> gx(y.shape());
        const T* pg = g.raw();
        const T* py = y.raw();
        T* po2 = gx.raw();
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t i = 0; i < sp.inner; ++i) {
                const std::size_t base = o * sp.len * sp.inner + i;
                T dot = T(0);
                for (std::size_t l = 0; l < sp.len; ++l) dot += pg[base + l * sp.inner] * py[base + l * sp.inner];
                for (std::size_t l = 0; l < sp.len; ++l) {
                    const std::size_t ix = base + l * sp.inner;
                    po2[ix] = py[ix] * (pg[ix] - dot);
                }
            }
        an->accumulate(gx);
    });
}

// ---------------------------------------------------------------------------
// Shape surgery: transpose / reshape / concat / split / slice.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> transpose_value(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
    if (perm.size() != a.rank()) throw std::invalid_argument("transpose: permutation rank mismatch");
    Shape os(a.rank());
    for (std::size_t i = 0; i < a.rank(); ++i) os[i] = a.shape()[perm[i]];
    Tensor<T> out(os);
    const auto in_strides = row_major_strides(a.shape());
    std::vector<std::size_t> src_stride(a.rank());
    for (std::size_t i = 0; i < a.rank(); ++i) src_stride[i] = in_strides[perm[i]];
    std::vector<std::size_t> idx(a.rank(), 0);
    const T* pa = a.raw();
    T* po = out.raw();
    std::size_t si = 0;
    const std::size_t n = out.numel();
    for (std::size_t flat = 0; flat < n; ++flat) {
        po[flat] = pa[si];
        for (std::size_t ax = a.rank(); ax-- > 0;) {
            ++idx[ax];
            si += src_stride[ax];
            if (idx[ax] < os[ax]) break;
            si -= src_stride[ax] * os[ax];
            idx[ax] = 0;
        }
    }
    return out;
}

}  // namespace detail

template <typename T>
Var<T> transpose(const Var<T>& a, const std::vector<std::size_t>& perm) {
    Tensor<T> out = detail::transpose_value(a.value(), perm);
    if (!detail::any_tracked<T>(a)) return Var<T>::leaf(std::move(out));
    auto an = a.node();
    std::vector<std::size_t> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
    return detail::make_result<T>(std::move(out), {an}, [an, inv](const Tensor<T>& g) {
        an->accumulate(detail::transpose_value(g, inv));
    });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape s) {
    Tensor<T> out = a.value().reshaped(s);
    if (!detail::any_tracked<T>(a)) return Var<T>::leaf(std::move(out));
    auto an = a.node();
    const Shape as = a.shape();
    return detail::make_result<T>(std::move(out), {an}, [an, as](const Tensor<T>& g) {
        an->accumulate(g.reshaped(as));
    });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
    if (xs.empty()) throw std::invalid_argument("concat: no inputs");
    Shape os = xs[0].shape();
    if (axis >= os.size()) throw std::invalid_argument("concat: axis out of range");
    std::size_t total = 0;
    for (const auto& x : xs) {
        if (x.shape().size() != os.size()) throw std::invalid_argument("concat: rank mismatch");
        for (std::size_t i = 0; i < os.size(); ++i)
            if (i != axis && x.shape()[i] != os[i])
                throw std::invalid_argument("concat: shape mismatch on non-concat axis: " + shape_str(x.shape()) +
                                            " vs " + shape_str(os));
        total += x.shape()[axis];
    }
    os[axis] = total;
    Tensor<T> out(os);
    const auto sp = detail::axis_span(os, axis);
    std::size_t cursor = 0;
    for (const auto& x : xs) {
        const std::size_t len = x.shape()[axis];
        const T* px = x.value().raw();
        for (std::size_t o = 0; o < sp.outer; ++o)
            std::copy(px + o * len * sp.inner, px + (o + 1) * len * sp.inner,
                      out.raw() + (o * sp.len + cursor) * sp.inner);
        cursor += len;
    }
    bool tracked = false;
    for (const auto& x : xs) tracked = tracked || x.tracked();
    if (!grad_mode_flag() || !tracked) return Var<T>::leaf(std::move(out));
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::vector<std::size_t> lens;
    for (const auto& x : xs) {
        parents.push_back(x.node());
        lens.push_back(x.shape()[axis]);
    }
    auto ps = parents;
    return detail::make_result<T>(std::move(out), std::move(parents), [ps, lens, sp](const Tensor<T>& g) {
        std::size_t cur = 0;
        for (std::size_t ui = 0; ui < ps.size(); ++ui) {
            const std::size_t len = lens[ui];
            if (ps[ui]->track) {
                Tensor<T> gx(ps[ui]->value.shape());
                for (std::size_t o = 0; o < sp.outer; ++o)
                    std::copy(g.raw() + (o * sp.len + cur) * sp.inner, g.raw() + (o * sp.len + cur + len) * sp.inner,
                              gx.raw() + o * len * sp.inner);
                ps[ui]->accumulate(gx);
            }
            cur += len;
        }
    });
}

template <typename T>
Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
    const auto sp = detail::axis_span(a.shape(), axis);
    if (start + len > sp.len || len == 0)
        throw std::invalid_argument("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                                    ") out of bounds for axis of length " + std::to_string(sp.len));
    Shape os = a.shape();
    os[axis] = len;
    Tensor<T> out(os);
    const T* pa = a.value().raw();
    for (std::size_t o = 0; o < sp.outer; ++o)
        std::copy(pa + (o * sp.len + start) * sp.inner, pa + (o * sp.len + start + len) * sp.inner,
                  out.raw() + o * len * sp.inner);
    if (!detail::any_tracked<T>(a)) return Var<T>::leaf(std::move(out));
    auto an = a.node();
    const Shape as = a.shape();
    return detail::make_result<T>(std::move(out), {an}, [an, as, sp, start, len](const Tensor<T>& g) {
        Tensor<T> gx(as);
        for (std::size_t o = 0; o < sp.outer; ++o)
            std::copy(g.raw() + o * len * sp.inner, g.raw() + (o + 1) * len * sp.inner,
                      gx.raw() + (o * sp.len + start) * sp.inner);
        an->accumulate(gx);
    });
}

template <typename T>
std::vector<Var<T>> split(const Var<T>& a, std::size_t axis, const std::vector<std::size_t>& sizes) {
    std::size_t total = 0;
    for (auto s : sizes) total += s;
    if (total != a.shape().at(axis))
        throw std::invalid_argument("split: sizes sum to " + std::to_string(total) + " but axis has length " +
                                    std::to_string(a.shape()[axis]));
    std::vector<Var<T>> out;
    std::size_t cur = 0;
    for (auto s : sizes) {
        out.push_back(slice(a, axis, cur, s));
        cur += s;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Row gather / scatter (axis 0).
// ---------------------------------------------------------------------------

template <typename T>
Var<T> take_rows(const Var<T>& a, const std::vector<std::size_t>& indices) {
    if (a.rank() < 1) throw std::invalid_argument("take_rows: rank >= 1 required");
    const std::size_t rows = a.shape()[0];
    const std::size_t inner = a.numel() / rows;
    Shape os = a.shape();
    os[0] = indices.size();
    if (indices.empty()) throw std::invalid_argument("take_rows: empty index list");
    Tensor<T> out(os);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= rows) throw std::invalid_argument("take_rows: index out of range");
        std::copy(a.value().raw() + indices[i] * inner, a.value().raw() + (indices[i] + 1) * inner,
                  out.raw() + i * inner);
    }
    if (!detail::any_tracked<T>(a)) return Var<T>::leaf(std::move(out));
    auto an = a.node();
    const Shape as = a.shape();
    return detail::make_result<T>(std::move(out), {an}, [an, as, indices, inner](const Tensor<T>& g) {
        Tensor<T> gx(as);
        for (std::size_t i = 0; i < indices.size(); ++i) {
            const T* src = g.raw() + i * inner;
            T* dst = gx.raw() + indices[i] * inner;
            for (std::size_t j = 0; j < inner; ++j) dst[j] += src[j];
        }
        an->accumulate(gx);
    });
}

/// out = base with out[indices[i], :] = rows[i, :]. Indices must be unique.
template <typename T>
Var<T> scatter_rows(const Var<T>& base, const std::vector<std::size_t>& indices, const Var<T>& rows) {
    const std::size_t nb = base.shape()[0];
    const std::size_t inner = base.numel() / nb;
    if (rows.shape()[0] != indices.size())
        throw std::invalid_argument("scatter_rows: " + std::to_string(indices.size()) + " indices but " +
                                    std::to_string(rows.shape()[0]) + " rows");
    if (rows.numel() / rows.shape()[0] != inner)
        throw std::invalid_argument("scatter_rows: row width mismatch");
    Tensor<T> out = base.value();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= nb) throw std::invalid_argument("scatter_rows: index out of range");
        std::copy(rows.value().raw() + i * inner, rows.value().raw() + (i + 1) * inner, out.raw() + indices[i] * inner);
    }
    if (!detail::any_tracked<T>(base, rows)) return Var<T>::leaf(std::move(out));
    auto bn = base.node(), rn = rows.node();
    const Shape bs = base.shape(), rs = rows.shape();
    return detail::make_result<T>(std::move(out), {bn, rn}, [bn, rn, bs, rs, indices, inner](const Tensor<T>& g) {
        if (bn->track) {
            Tensor<T> gb = g;
            for (auto ix : indices) std::fill(gb.raw() + ix * inner, gb.raw() + (ix + 1) * inner, T(0));
            bn->accumulate(gb);
        }
        if (rn->track) {
            Tensor<T> gr(rs);
            for (std::size_t i = 0; i < indices.size(); ++i)
                std::copy(g.raw() + indices[i] * inner, g.raw() + (indices[i] + 1) * inner, gr.raw() + i * inner);
            rn->accumulate(gr);
        }
    });
}

/// Repeat a [1, D] row n times -> [n, D].
template <typename T>
Var<T> tile_rows(const Var<T>& a, std::size_t n) {
    if (a.rank() != 2 || a.shape()[0] != 1) throw std::invalid_argument("tile_rows: expected shape [1, D]");
    const std::size_t d = a.shape()[1];
    Tensor<T> out({n, d});
    for (std::size_t i = 0; i < n; ++i) std::copy(a.value().raw(), a.value().raw() + d, out.raw() + i * d);
    if (!detail::any_tracked<T>(a)) return Var<T>::leaf(std::move(out));
    auto an = a.node();
    return detail::make_result<T>(std::move(out), {an}, [an, n, d](const Tensor<T>& g) {
        Tensor<T> gx({1, d});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gx[j] += g[i * d + j];
        an->accumulate(gx);
    });
}

// ---------------------------------------------------------------------------
// Cumulative (prefix) scan along an axis. The additive scan is sequential per
// lane so that it matches loop-computed prefix sums exactly.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> cumsum(const Var<T>& a, std::size_t axis) {
    const auto sp = detail::axis_span(a.shape(), axis);
    Tensor<T> out(a.shape());
    const T* pa = a.value().raw();
    T* po = out.raw();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.len * sp.inner + i;
            T acc = T(0);
            for (std::size_t l = 0; l < sp.len; ++l) {
                acc += pa[base + l * sp.inner];
                po[base + l * sp.inner] = acc;
            }
        }
    if (!detail::any_tracked<T>(a)) return Var<T>::leaf(std::move(out));
    auto an = a.node();
    return detail::make_result<T>(std::move(out), {an}, [an, sp](const Tensor<T>& g) {
        // gradient of prefix-sum is suffix-sum
        Tensor<T> gx(g.shape());
        const T* pg = g.raw();
        T* po2 = gx.raw();
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t i = 0; i < sp.inner; ++i) {
                const std::size_t base = o * sp.len * sp.inner + i;
                T acc = T(0);
                for (std::size_t l = sp.len; l-- > 0;) {
                    acc += pg[base + l * sp.inner];
                    po2[base + l * sp.inner] = acc;
                }
            }
        an->accumulate(gx);
    });
}

/// Non-differentiating generic inclusive scan (combine must be associative).
template <typename T, class F>
Tensor<T> scan_value(const Tensor<T>& a, std::size_t axis, F combine) {
    const auto sp = detail::axis_span(a.shape(), axis);
    Tensor<T> out(a.shape());
    const T* pa = a.raw();
    T* po = out.raw();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.len * sp.inner + i;
            T acc = pa[base];
            po[base] = acc;
            for (std::size_t l = 1; l < sp.len; ++l) {
                acc = combine(acc, pa[base + l * sp.inner]);
                po[base + l * sp.inner] = acc;
            }
        }
    return out;
}

// ---------------------------------------------------------------------------
// RMS normalization over the last axis with a per-feature scale.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> rmsnorm(const Var<T>& x, const Var<T>& scale, T eps = T(1e-30)) {
    const std::size_t d = x.shape().back();
    if (scale.numel() != d)
        throw std::invalid_argument("rmsnorm: scale has " + std::to_string(scale.numel()) + " features, input needs " +
                                    std::to_string(d));
    const std::size_t rows = x.numel() / d;
    Tensor<T> out(x.shape());
    std::vector<T> inv_rms(rows);
    const T* px = x.value().raw();
    const T* ps = scale.value().raw();
    T* po = out.raw();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = px + r * d;
        T ms = T(0);
        for (std::size_t j = 0; j < d; ++j) ms += row[j] * row[j];
        ms = ms / static_cast<T>(d) + eps;
        const T inv = T(1) / std::sqrt(ms);
        inv_rms[r] = inv;
        for (std::size_t j = 0; j < d; ++j) po[r * d + j] = row[j] * inv * ps[j];
    }
    if (!detail::any_tracked<T>(x, scale)) return Var<T>::leaf(std::move(out));
    auto xn = x.node(), sn = scale.node();
    const Shape ss = scale.shape();
    return detail::make_result<T>(std::move(out), {xn, sn}, [xn, sn, ss, inv_rms, d](const Tensor<T>& g) {
        const std::size_t rows = xn->value.numel() / d;
        const T* px2 = xn->value.raw();
        const T* ps2 = sn->value.raw();
        const T* pg = g.raw();
        if (xn->track) {
            Tensor<T> gx(xn->value.shape());
            T* po2 = gx.raw();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* row = px2 + r * d;
                const T* grow = pg + r * d;
                const T inv = inv_rms[r];
                T dot = T(0);
                for (std::size_t j = 0; j < d; ++j) dot += grow[j] * ps2[j] * row[j];
                const T c = dot * inv * inv * inv / static_cast<T>(d);
                for (std::size_t j = 0; j < d; ++j) po2[r * d + j] = grow[j] * ps2[j] * inv - row[j] * c;
            }
            xn->accumulate(gx);
        }
        if (sn->track) {
            Tensor<T> gs(ss);
            T* po3 = gs.raw();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* row = px2 + r * d;
                const T* grow = pg + r * d;
                const T inv = inv_rms[r];
                for (std::size_t j = 0; j < d; ++j) po3[j] += grow[j] * row[j] * inv;
            }
            sn->accumulate(gs);
        }
    });
}

// ---------------------------------------------------------------------------
// Backward pass.
// ---------------------------------------------------------------------------

template <typename T>
void backward(const Var<T>& root) {
    if (root.numel() != 1)
        throw std::invalid_argument("backward: root must be a scalar, got shape " + shape_str(root.shape()));
    if (!root.tracked()) return;

    // reverse postorder = topological order (consumers before producers)
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->track && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->accumulate(Tensor<T>::ones(root.shape()));
    for (std::size_t i = order.size(); i-- > 0;) {
        Node<T>* n = order[i];
        if (n->backprop && n->has_grad) n->backprop(n->grad);
    }
}

}  // namespace csimae
