#pragma once

// Elementwise, broadcasting, shape and reduction ops.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "tensor.hpp"

namespace cvmh::ops {

// ---------------------------------------------------------------- broadcasting

namespace detail {

struct BroadcastPlan {
    Shape out;
    std::vector<std::size_t> stride_a, stride_b;  // 0 on broadcast axes
};

inline std::vector<std::size_t> strides_of(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

inline BroadcastPlan broadcast_plan(const Shape& a, const Shape& b, const char* op) {
    if (a.size() != b.size())
        throw ConfigError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    BroadcastPlan p;
    const auto sa = strides_of(a), sb = strides_of(b);
    p.out.resize(a.size());
    p.stride_a.resize(a.size());
    p.stride_b.resize(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] != b[i] && a[i] != 1 && b[i] != 1)
            throw ConfigError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        p.out[i] = std::max(a[i], b[i]);
        p.stride_a[i] = a[i] == 1 ? 0 : sa[i];
        p.stride_b[i] = b[i] == 1 ? 0 : sb[i];
    }
    return p;
}

/// Calls fn(out_index, a_index, b_index) in row-major output order.
template <typename Fn>
void for_each_broadcast(const BroadcastPlan& p, Fn&& fn) {
    const std::size_t rank = p.out.size();
    const std::size_t total = numel(p.out);
    if (rank == 0) {
        fn(0, 0, 0);
        return;
    }
    const std::size_t inner = p.out[rank - 1];
    const std::size_t ia = p.stride_a[rank - 1], ib = p.stride_b[rank - 1];
    std::vector<std::size_t> idx(rank, 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t o = 0; o < total; o += inner) {
        for (std::size_t j = 0; j < inner; ++j) fn(o + j, oa + j * ia, ob + j * ib);
        for (std::size_t d = rank - 1; d-- > 0;) {
            ++idx[d];
            oa += p.stride_a[d];
            ob += p.stride_b[d];
            if (idx[d] < p.out[d]) break;
            oa -= p.stride_a[d] * idx[d];
            ob -= p.stride_b[d] * idx[d];
            idx[d] = 0;
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() == b.shape()) {
        std::vector<T> out(a.numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
        auto na = a.node_ptr(), nb = b.node_ptr();
        return make_result<T>(a.shape(), std::move(out), {a, b}, "add", [na, nb](Node<T>& o) {
            if (T* g = grad_sink(na))
                for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
            if (T* g = grad_sink(nb))
                for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        });
    }
    auto plan = detail::broadcast_plan(a.shape(), b.shape(), "add");
    std::vector<T> out(numel(plan.out));
    const auto& av = a.values();
    const auto& bv = b.values();
    detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] + bv[j]; });
    auto na = a.node_ptr(), nb = b.node_ptr();
    return make_result<T>(plan.out, std::move(out), {a, b}, "add", [na, nb, plan](Node<T>& o) {
        T* ga = grad_sink(na);
        T* gb = grad_sink(nb);
        detail::for_each_broadcast(plan, [&](std::size_t k, std::size_t i, std::size_t j) {
            if (ga) ga[i] += o.grad[k];
            if (gb) gb[j] += o.grad[k];
        });
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    auto plan = detail::broadcast_plan(a.shape(), b.shape(), "sub");
    std::vector<T> out(numel(plan.out));
    const auto& av = a.values();
    const auto& bv = b.values();
    detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] - bv[j]; });
    auto na = a.node_ptr(), nb = b.node_ptr();
    return make_result<T>(plan.out, std::move(out), {a, b}, "sub", [na, nb, plan](Node<T>& o) {
        T* ga = grad_sink(na);
        T* gb = grad_sink(nb);
        detail::for_each_broadcast(plan, [&](std::size_t k, std::size_t i, std::size_t j) {
            if (ga) ga[i] += o.grad[k];
            if (gb) gb[j] -= o.grad[k];
        });
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() == b.shape()) {
        std::vector<T> out(a.numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
        auto na = a.node_ptr(), nb = b.node_ptr();
        return make_result<T>(a.shape(), std::move(out), {a, b}, "mul", [na, nb](Node<T>& o) {
            if (T* g = grad_sink(na))
                for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * nb->data[i];
            if (T* g = grad_sink(nb))
                for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * na->data[i];
        });
    }
    auto plan = detail::broadcast_plan(a.shape(), b.shape(), "mul");
    std::vector<T> out(numel(plan.out));
    const auto& av = a.values();
    const auto& bv = b.values();
    detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] * bv[j]; });
    auto na = a.node_ptr(), nb = b.node_ptr();
    return make_result<T>(plan.out, std::move(out), {a, b}, "mul", [na, nb, plan](Node<T>& o) {
        T* ga = grad_sink(na);
        T* gb = grad_sink(nb);
        detail::for_each_broadcast(plan, [&](std::size_t k, std::size_t i, std::size_t j) {
            if (ga) ga[i] += o.grad[k] * nb->data[j];
            if (gb) gb[j] += o.grad[k] * na->data[i];
        });
    });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

// ---------------------------------------------------------------- unary maps

namespace detail {

/// Elementwise op with derivative expressed through (x, y).
template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& x, const char* name, F f, D df) {
    std::vector<T> out(x.numel());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
    auto nx = x.node_ptr();
    return make_result<T>(x.shape(), std::move(out), {x}, name, [nx, df](Node<T>& o) {
        T* g = grad_sink(nx);
        if (!g) return;
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * df(nx->data[i], o.data[i]);
    });
}

template <typename T>
T sigmoid_scalar(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
T softplus_scalar(T x) {
    // log(1 + e^x) without overflow
    return x > T(20) ? x : std::log1p(std::exp(x));
}

}  // namespace detail

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    return detail::unary<T>(x, "scale", [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
    return detail::unary<T>(x, "add_scalar", [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

/// 1 - x
template <typename T>
Tensor<T> one_minus(const Tensor<T>& x) {
    return detail::unary<T>(x, "one_minus", [](T v) { return T(1) - v; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
    return detail::unary<T>(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return detail::unary<T>(
        x, "relu", [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return detail::unary<T>(x, "sigmoid", detail::sigmoid_scalar<T>, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
    return detail::unary<T>(
        x, "silu", [](T v) { return v * detail::sigmoid_scalar(v); },
        [](T v, T) {
            const T s = detail::sigmoid_scalar(v);
            return s * (T(1) + v * (T(1) - s));
        });
}

/// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    constexpr T inv_sqrt2pi = T(0.39894228040143267794);
    return detail::unary<T>(
        x, "gelu", [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
        [](T v, T) { return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v); });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
    return detail::unary<T>(x, "softplus", detail::softplus_scalar<T>,
                            [](T v, T) { return detail::sigmoid_scalar(v); });
}

// ---------------------------------------------------------------- shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel(shape) != x.numel())
        throw ConfigError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
    auto nx = x.node_ptr();
    return make_result<T>(std::move(shape), x.values(), {x}, "reshape", [nx](Node<T>& o) {
        if (T* g = grad_sink(nx))
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    });
}

namespace detail {
inline void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& n, std::size_t& inner) {
    if (axis >= s.size()) throw ConfigError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    outer = 1;
    inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    n = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace detail

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
    if (xs.empty()) throw ConfigError("concat: no inputs");
    Shape out_shape = xs[0].shape();
    std::size_t total = 0;
    for (const auto& x : xs) {
        Shape s = x.shape();
        if (s.size() != out_shape.size()) throw ConfigError("concat: rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i)
            if (i != axis && s[i] != out_shape[i])
                throw ConfigError("concat: " + shape_str(s) + " vs " + shape_str(out_shape));
        total += s.at(axis);
    }
    out_shape[axis] = total;
    std::size_t outer, n, inner;
    detail::split_axis(out_shape, axis, outer, n, inner);
    std::vector<T> out(numel(out_shape));
    std::size_t offset = 0;
    std::vector<std::shared_ptr<Node<T>>> nodes;
    std::vector<std::size_t> offsets;
    for (const auto& x : xs) {
        const std::size_t k = x.dim(axis);
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(x.values().begin() + o * k * inner, k * inner, out.begin() + (o * n + offset) * inner);
        nodes.push_back(x.node_ptr());
        offsets.push_back(offset);
        offset += k;
    }
    return make_result<T>(out_shape, std::move(out), xs, "concat",
                          [nodes, offsets, outer, n, inner, axis](Node<T>& o) {
                              for (std::size_t t = 0; t < nodes.size(); ++t) {
                                  T* g = grad_sink(nodes[t]);
                                  if (!g) continue;
                                  const std::size_t k = nodes[t]->shape[axis];
                                  for (std::size_t a = 0; a < outer; ++a)
                                      for (std::size_t j = 0; j < k * inner; ++j)
                                          g[a * k * inner + j] += o.grad[(a * n + offsets[t]) * inner + j];
                              }
                          });
}

/// x.narrow(axis, start, len)
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
    std::size_t outer, n, inner;
    detail::split_axis(x.shape(), axis, outer, n, inner);
    if (start + len > n) throw ConfigError("slice: range exceeds axis extent " + std::to_string(n));
    Shape s = x.shape();
    s[axis] = len;
    std::vector<T> out(numel(s));
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(x.values().begin() + (o * n + start) * inner, len * inner, out.begin() + o * len * inner);
    auto nx = x.node_ptr();
    return make_result<T>(s, std::move(out), {x}, "slice", [nx, outer, n, inner, start, len](Node<T>& o) {
        T* g = grad_sink(nx);
        if (!g) return;
        for (std::size_t a = 0; a < outer; ++a)
            for (std::size_t j = 0; j < len * inner; ++j) g[(a * n + start) * inner + j] += o.grad[a * len * inner + j];
    });
}

/// out[..., t] = x[..., index[t]] over the last axis.
template <typename T>
Tensor<T> gather_last(const Tensor<T>& x, std::span<const std::uint32_t> index) {
    const std::size_t L = x.shape().back();
    const std::size_t M = index.size();
    const std::size_t rows = x.numel() / L;
    for (const auto i : index)
        if (i >= L) throw ConfigError("gather_last: index out of range");
    Shape s = x.shape();
    s.back() = M;
    std::vector<T> out(rows * M);
    const auto& xv = x.values();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t t = 0; t < M; ++t) out[r * M + t] = xv[r * L + index[t]];
    auto nx = x.node_ptr();
    std::vector<std::uint32_t> idx(index.begin(), index.end());
    return make_result<T>(s, std::move(out), {x}, "gather_last", [nx, idx = std::move(idx), rows, L, M](Node<T>& o) {
        T* g = grad_sink(nx);
        if (!g) return;
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t t = 0; t < M; ++t) g[r * L + idx[t]] += o.grad[r * M + t];
    });
}

/// [N,C,H,W] -> [N,4C,H/2,W/2]; channel q*C + c holds pixel (2h+dh, 2w+dw) with q = 2*dh + dw.
template <typename T>
Tensor<T> space_to_depth2(const Tensor<T>& x) {
    if (x.rank() != 4) throw ConfigError("space_to_depth2 expects NCHW, got " + shape_str(x.shape()));
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % 2 || W % 2) throw ConfigError("space_to_depth2: odd spatial extent " + shape_str(x.shape()));
    const std::size_t Ho = H / 2, Wo = W / 2;
    std::vector<std::size_t> map(x.numel());  // output index -> input index
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t q = 0; q < 4; ++q)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t h = 0; h < Ho; ++h)
                    for (std::size_t w = 0; w < Wo; ++w) {
                        const std::size_t o = (((n * 4 + q) * C + c) * Ho + h) * Wo + w;
                        map[o] = ((n * C + c) * H + 2 * h + q / 2) * W + 2 * w + q % 2;
                    }
    std::vector<T> out(x.numel());
    for (std::size_t o = 0; o < out.size(); ++o) out[o] = x[map[o]];
    auto nx = x.node_ptr();
    return make_result<T>({N, 4 * C, Ho, Wo}, std::move(out), {x}, "space_to_depth2",
                          [nx, map = std::move(map)](Node<T>& o) {
                              T* g = grad_sink(nx);
                              if (!g) return;
                              for (std::size_t i = 0; i < map.size(); ++i) g[map[i]] += o.grad[i];
                          });
}

/// Inverse of space_to_depth2: [N,4C,H,W] -> [N,C,2H,2W].
template <typename T>
Tensor<T> depth_to_space2(const Tensor<T>& x) {
    if (x.rank() != 4 || x.dim(1) % 4)
        throw ConfigError("depth_to_space2 expects NCHW with channels divisible by 4, got " + shape_str(x.shape()));
    const std::size_t N = x.dim(0), C = x.dim(1) / 4, H = x.dim(2), W = x.dim(3);
    std::vector<std::size_t> map(x.numel());  // output index -> input index
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t h = 0; h < 2 * H; ++h)
                for (std::size_t w = 0; w < 2 * W; ++w) {
                    const std::size_t q = (h % 2) * 2 + w % 2;
                    const std::size_t o = ((n * C + c) * 2 * H + h) * 2 * W + w;
                    map[o] = (((n * 4 + q) * C + c) * H + h / 2) * W + w / 2;
                }
    std::vector<T> out(x.numel());
    for (std::size_t o = 0; o < out.size(); ++o) out[o] = x[map[o]];
    auto nx = x.node_ptr();
    return make_result<T>({N, C, 2 * H, 2 * W}, std::move(out), {x}, "depth_to_space2",
                          [nx, map = std::move(map)](Node<T>& o) {
                              T* g = grad_sink(nx);
                              if (!g) return;
                              for (std::size_t i = 0; i < map.size(); ++i) g[map[i]] += o.grad[i];
                          });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T s = T(0);
    for (const T v : x.values()) s += v;
    auto nx = x.node_ptr();
    return make_result<T>({1}, {s}, {x}, "sum", [nx](Node<T>& o) {
        if (T* g = grad_sink(nx))
            for (std::size_t i = 0; i < nx->data.size(); ++i) g[i] += o.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

enum class Reduce { Sum, Mean, Max, Min };

/// Reduces one axis. Max/min route the gradient to a single element: the
/// first extremum in index order.
template <typename T>
Tensor<T> reduce_axis(const Tensor<T>& x, std::size_t axis, Reduce kind, bool keepdim = false) {
    std::size_t outer, n, inner;
    detail::split_axis(x.shape(), axis, outer, n, inner);
    if (n == 0) throw ConfigError("reduce over empty axis");
    Shape s = x.shape();
    if (keepdim)
        s[axis] = 1;
    else
        s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
    if (s.empty()) s = {1};
    std::vector<T> out(outer * inner);
    std::vector<std::uint32_t> arg;  // for max/min
    if (kind == Reduce::Max || kind == Reduce::Min) arg.resize(out.size());
    const auto& xv = x.values();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n * inner + i;
            T acc = xv[base];
            std::uint32_t best = 0;
            for (std::size_t k = 1; k < n; ++k) {
                const T v = xv[base + k * inner];
                switch (kind) {
                    case Reduce::Sum:
                    case Reduce::Mean: acc += v; break;
                    case Reduce::Max:
                        if (v > acc) acc = v, best = static_cast<std::uint32_t>(k);
                        break;
                    case Reduce::Min:
                        if (v < acc) acc = v, best = static_cast<std::uint32_t>(k);
                        break;
                }
            }
            if (kind == Reduce::Mean) acc /= static_cast<T>(n);
            out[o * inner + i] = acc;
            if (!arg.empty()) arg[o * inner + i] = best;
        }
    auto nx = x.node_ptr();
    return make_result<T>(s, std::move(out), {x}, "reduce_axis",
                          [nx, kind, outer, n, inner, arg = std::move(arg)](Node<T>& o) {
                              T* g = grad_sink(nx);
                              if (!g) return;
                              const T w = kind == Reduce::Mean ? T(1) / static_cast<T>(n) : T(1);
                              for (std::size_t a = 0; a < outer; ++a)
                                  for (std::size_t i = 0; i < inner; ++i) {
                                      const T go = o.grad[a * inner + i];
                                      const std::size_t base = a * n * inner + i;
                                      if (!arg.empty()) {
                                          g[base + arg[a * inner + i] * inner] += go;
                                      } else {
                                          for (std::size_t k = 0; k < n; ++k) g[base + k * inner] += go * w;
                                      }
                                  }
                          });
}

/// Average, max and min over all spatial positions of [N,C,...] -> three [N,C].
template <typename T>
struct GlobalPools {
    Tensor<T> avg, max, min;
};

template <typename T>
GlobalPools<T> global_pools(const Tensor<T>& x) {
    if (x.rank() < 3) throw ConfigError("global_pools expects [N,C,spatial...], got " + shape_str(x.shape()));
    const std::size_t N = x.dim(0), C = x.dim(1);
    const std::size_t S = x.numel() / (N * C);
    if (S == 0) throw ConfigError("global_pools over empty spatial extent");
    auto flat = reshape(x, {N, C, S});
    return {reduce_axis(flat, 2, Reduce::Mean), reduce_axis(flat, 2, Reduce::Max), reduce_axis(flat, 2, Reduce::Min)};
}

}  // namespace cvmh::ops
