#pragma once

// Convolutions and affine maps: conv2d (im2col + GEMM), depthwise conv2d,
// channel-axis conv1d, point-wise (1x1) conv over NC... tensors and linear
// over the last axis.
//
// Weight gradients are reduced over the batch in a fixed order from
// per-sample partial buffers, so results do not depend on CVMH_THREADS.

#include <algorithm>
#include <optional>
#include <vector>

#include "parallel.hpp"
#include "tensor.hpp"

namespace cvmh::ops {

namespace gemm {

/// C[M,N] (+)= A[M,K] * B[K,N]
template <typename T>
void nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C, bool accumulate) {
    if (!accumulate) std::fill(C, C + M * N, T(0));
    for (std::size_t i = 0; i < M; ++i) {
        T* c = C + i * N;
        for (std::size_t k = 0; k < K; ++k) {
            const T a = A[i * K + k];
            const T* b = B + k * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
        }
    }
}

/// C[M,N] (+)= A[K,M]^T * B[K,N]
template <typename T>
void tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C, bool accumulate) {
    if (!accumulate) std::fill(C, C + M * N, T(0));
    for (std::size_t k = 0; k < K; ++k) {
        const T* b = B + k * N;
        for (std::size_t i = 0; i < M; ++i) {
            const T a = A[k * M + i];
            T* c = C + i * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
        }
    }
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

/// C[M,N] (+)= A[M,K] * B[N,K]^T, via an explicit transpose of B.
template <typename T>
void nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C, bool accumulate,
        std::vector<T>& scratch) {
    scratch.resize(N * K);
    transpose(N, K, B, scratch.data());
    nn(M, N, K, A, scratch.data(), C, accumulate);
}

}  // namespace gemm

namespace detail {

/// Sums per-sample partial buffers into dst in sample order.
template <typename T>
void reduce_partials(const std::vector<std::vector<T>>& parts, T* dst) {
    for (const auto& p : parts)
        for (std::size_t i = 0; i < p.size(); ++i) dst[i] += p[i];
}

inline void check_rank(const Shape& s, std::size_t r, const char* what) {
    if (s.size() != r)
        throw ConfigError(std::string(what) + ": expected rank " + std::to_string(r) + ", got " + shape_str(s));
}

}  // namespace detail

// ---------------------------------------------------------------- point-wise

/// 1x1 convolution: x [N,Cin,S...] with w [Cout,Cin] -> [N,Cout,S...].
template <typename T>
Tensor<T> pointwise(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
    if (x.rank() < 2 || w.rank() != 2 || w.dim(1) != x.dim(1))
        throw ConfigError("pointwise: input " + shape_str(x.shape()) + " incompatible with weight " +
                          shape_str(w.shape()));
    const std::size_t N = x.dim(0), Cin = x.dim(1), Cout = w.dim(0);
    const std::size_t P = x.numel() / (N * Cin);
    if (b.defined() && b.numel() != Cout) throw ConfigError("pointwise: bias size mismatch");
    Shape s = x.shape();
    s[1] = Cout;
    std::vector<T> out(N * Cout * P);
    const T* xv = x.values().data();
    const T* wv = w.values().data();
    parallel_for(N, [&](std::size_t n) {
        T* o = out.data() + n * Cout * P;
        gemm::nn(Cout, P, Cin, wv, xv + n * Cin * P, o, false);
        if (b.defined())
            for (std::size_t c = 0; c < Cout; ++c)
                for (std::size_t p = 0; p < P; ++p) o[c * P + p] += b[c];
    });
    auto nx = x.node_ptr(), nw = w.node_ptr(), nb = b.defined() ? b.node_ptr() : nullptr;
    return make_result<T>(s, std::move(out), {x, w, b}, "pointwise", [nx, nw, nb, N, Cin, Cout, P](Node<T>& o) {
        const T* go = o.grad.data();
        if (T* gx = grad_sink(nx))
            parallel_for(N, [&](std::size_t n) {
                gemm::tn(Cin, P, Cout, nw->data.data(), go + n * Cout * P, gx + n * Cin * P, true);
            });
        if (T* gw = grad_sink(nw)) {
            std::vector<std::vector<T>> parts(N, std::vector<T>(Cout * Cin));
            parallel_for(N, [&](std::size_t n) {
                std::vector<T> scratch;
                gemm::nt(Cout, Cin, P, go + n * Cout * P, nx->data.data() + n * Cin * P, parts[n].data(), false,
                         scratch);
            });
            detail::reduce_partials(parts, gw);
        }
        if (T* gb = grad_sink(nb))
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < Cout; ++c) {
                    T acc = T(0);
                    for (std::size_t p = 0; p < P; ++p) acc += go[(n * Cout + c) * P + p];
                    gb[c] += acc;
                }
    });
}

// ---------------------------------------------------------------- linear

/// Affine map over the last axis: x [..., Din], w [Dout, Din] -> [..., Dout].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
    if (x.rank() < 1 || w.rank() != 2 || w.dim(1) != x.shape().back())
        throw ConfigError("linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
    const std::size_t Din = w.dim(1), Dout = w.dim(0);
    const std::size_t R = x.numel() / Din;
    if (b.defined() && b.numel() != Dout) throw ConfigError("linear: bias size mismatch");
    Shape s = x.shape();
    s.back() = Dout;
    std::vector<T> out(R * Dout);
    std::vector<T> scratch;
    gemm::nt(R, Dout, Din, x.values().data(), w.values().data(), out.data(), false, scratch);
    if (b.defined())
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t o = 0; o < Dout; ++o) out[r * Dout + o] += b[o];
    auto nx = x.node_ptr(), nw = w.node_ptr(), nb = b.defined() ? b.node_ptr() : nullptr;
    return make_result<T>(s, std::move(out), {x, w, b}, "linear", [nx, nw, nb, R, Din, Dout](Node<T>& o) {
        const T* go = o.grad.data();
        if (T* gx = grad_sink(nx)) gemm::nn(R, Din, Dout, go, nw->data.data(), gx, true);
        if (T* gw = grad_sink(nw)) gemm::tn(Dout, Din, R, go, nx->data.data(), gw, true);
        if (T* gb = grad_sink(nb))
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t j = 0; j < Dout; ++j) gb[j] += go[r * Dout + j];
    });
}

// ---------------------------------------------------------------- conv2d

struct Conv2dGeometry {
    std::size_t N, Cin, H, W, Cout, kh, kw, stride, pad, Ho, Wo;
};

inline Conv2dGeometry conv2d_geometry(const Shape& x, const Shape& w, std::size_t stride, std::size_t pad,
                                      bool depthwise) {
    detail::check_rank(x, 4, "conv2d input");
    detail::check_rank(w, 4, "conv2d weight");
    if (stride == 0) throw ConfigError("conv2d: stride must be >= 1");
    Conv2dGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], w[3], stride, pad, 0, 0};
    if (depthwise) {
        if (w[1] != 1 || w[0] != x[1])
            throw ConfigError("depthwise_conv2d: weight " + shape_str(w) + " does not match " +
                              std::to_string(x[1]) + " channels");
    } else if (w[1] != x[1]) {
        throw ConfigError("conv2d: input channels " + std::to_string(x[1]) + " vs weight " + shape_str(w));
    }
    if (g.H + 2 * pad < g.kh || g.W + 2 * pad < g.kw)
        throw ConfigError("conv2d: kernel " + shape_str(w) + " larger than padded input " + shape_str(x));
    g.Ho = (g.H + 2 * pad - g.kh) / stride + 1;
    g.Wo = (g.W + 2 * pad - g.kw) / stride + 1;
    return g;
}

namespace detail {

template <typename T>
void im2col(const Conv2dGeometry& g, const T* x, T* col) {
    const std::size_t P = g.Ho * g.Wo;
    for (std::size_t c = 0; c < g.Cin; ++c)
        for (std::size_t i = 0; i < g.kh; ++i)
            for (std::size_t j = 0; j < g.kw; ++j) {
                T* row = col + ((c * g.kh + i) * g.kw + j) * P;
                for (std::size_t oh = 0; oh < g.Ho; ++oh) {
                    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + i) -
                                              static_cast<std::ptrdiff_t>(g.pad);
                    for (std::size_t ow = 0; ow < g.Wo; ++ow) {
                        const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + j) -
                                                  static_cast<std::ptrdiff_t>(g.pad);
                        const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<std::ptrdiff_t>(g.H) &&
                                            iw < static_cast<std::ptrdiff_t>(g.W);
                        row[oh * g.Wo + ow] = inside ? x[(c * g.H + ih) * g.W + iw] : T(0);
                    }
                }
            }
}

template <typename T>
void col2im(const Conv2dGeometry& g, const T* col, T* x) {
    const std::size_t P = g.Ho * g.Wo;
    for (std::size_t c = 0; c < g.Cin; ++c)
        for (std::size_t i = 0; i < g.kh; ++i)
            for (std::size_t j = 0; j < g.kw; ++j) {
                const T* row = col + ((c * g.kh + i) * g.kw + j) * P;
                for (std::size_t oh = 0; oh < g.Ho; ++oh) {
                    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + i) -
                                              static_cast<std::ptrdiff_t>(g.pad);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.H)) continue;
                    for (std::size_t ow = 0; ow < g.Wo; ++ow) {
                        const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + j) -
                                                  static_cast<std::ptrdiff_t>(g.pad);
                        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.W)) continue;
                        x[(c * g.H + ih) * g.W + iw] += row[oh * g.Wo + ow];
                    }
                }
            }
}

}  // namespace detail

/// Dense 2D convolution, NCHW input and [Cout,Cin,kh,kw] weight.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}, std::size_t stride = 1,
                 std::size_t pad = 0) {
    const auto g = conv2d_geometry(x.shape(), w.shape(), stride, pad, false);
    if (b.defined() && b.numel() != g.Cout) throw ConfigError("conv2d: bias size mismatch");
    const std::size_t K = g.Cin * g.kh * g.kw, P = g.Ho * g.Wo;
    std::vector<T> out(g.N * g.Cout * P);
    parallel_for(g.N, [&](std::size_t n) {
        std::vector<T> col(K * P);
        detail::im2col(g, x.values().data() + n * g.Cin * g.H * g.W, col.data());
        T* o = out.data() + n * g.Cout * P;
        gemm::nn(g.Cout, P, K, w.values().data(), col.data(), o, false);
        if (b.defined())
            for (std::size_t c = 0; c < g.Cout; ++c)
                for (std::size_t p = 0; p < P; ++p) o[c * P + p] += b[c];
    });
    auto nx = x.node_ptr(), nw = w.node_ptr(), nb = b.defined() ? b.node_ptr() : nullptr;
    return make_result<T>({g.N, g.Cout, g.Ho, g.Wo}, std::move(out), {x, w, b}, "conv2d",
                          [nx, nw, nb, g, K, P](Node<T>& o) {
                              const T* go = o.grad.data();
                              T* gx = grad_sink(nx);
                              T* gw = grad_sink(nw);
                              std::vector<std::vector<T>> parts(gw ? g.N : 0, std::vector<T>(g.Cout * K));
                              parallel_for(g.N, [&](std::size_t n) {
                                  std::vector<T> col(K * P);
                                  const T* gon = go + n * g.Cout * P;
                                  if (gw) {
                                      std::vector<T> scratch;
                                      detail::im2col(g, nx->data.data() + n * g.Cin * g.H * g.W, col.data());
                                      gemm::nt(g.Cout, K, P, gon, col.data(), parts[n].data(), false, scratch);
                                  }
                                  if (gx) {
                                      gemm::tn(K, P, g.Cout, nw->data.data(), gon, col.data(), false);
                                      detail::col2im(g, col.data(), gx + n * g.Cin * g.H * g.W);
                                  }
                              });
                              if (gw) detail::reduce_partials(parts, gw);
                              if (T* gb = grad_sink(nb))
                                  for (std::size_t n = 0; n < g.N; ++n)
                                      for (std::size_t c = 0; c < g.Cout; ++c) {
                                          T acc = T(0);
                                          for (std::size_t p = 0; p < P; ++p) acc += go[(n * g.Cout + c) * P + p];
                                          gb[c] += acc;
                                      }
                          });
}

/// Per-channel 2D convolution; w is [C,1,kh,kw].
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}, std::size_t stride = 1,
                           std::size_t pad = 0) {
    const auto g = conv2d_geometry(x.shape(), w.shape(), stride, pad, true);
    if (b.defined() && b.numel() != g.Cin) throw ConfigError("depthwise_conv2d: bias size mismatch");
    const std::size_t C = g.Cin, P = g.Ho * g.Wo;
    std::vector<T> out(g.N * C * P);
    // Loop order (c, i, j, oh, ow) keeps the innermost loop contiguous.
    auto body = [g](const T* xin, const T* wk, T* o) {
        for (std::size_t i = 0; i < g.kh; ++i)
            for (std::size_t j = 0; j < g.kw; ++j) {
                const T k = wk[i * g.kw + j];
                for (std::size_t oh = 0; oh < g.Ho; ++oh) {
                    const std::ptrdiff_t ih =
                        static_cast<std::ptrdiff_t>(oh * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.H)) continue;
                    const T* xr = xin + ih * g.W;
                    T* orow = o + oh * g.Wo;
                    for (std::size_t ow = 0; ow < g.Wo; ++ow) {
                        const std::ptrdiff_t iw =
                            static_cast<std::ptrdiff_t>(ow * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
                        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.W)) continue;
                        orow[ow] += k * xr[iw];
                    }
                }
            }
    };
    parallel_for(g.N, [&](std::size_t n) {
        for (std::size_t c = 0; c < C; ++c) {
            T* o = out.data() + (n * C + c) * P;
            if (b.defined()) std::fill(o, o + P, b[c]);
            body(x.values().data() + (n * C + c) * g.H * g.W, w.values().data() + c * g.kh * g.kw, o);
        }
    });
    auto nx = x.node_ptr(), nw = w.node_ptr(), nb = b.defined() ? b.node_ptr() : nullptr;
    return make_result<T>(
        {g.N, C, g.Ho, g.Wo}, std::move(out), {x, w, b}, "depthwise_conv2d", [nx, nw, nb, g, C, P](Node<T>& o) {
            const T* go = o.grad.data();
            T* gx = grad_sink(nx);
            T* gw = grad_sink(nw);
            const std::size_t KK = g.kh * g.kw;
            std::vector<std::vector<T>> parts(gw ? g.N : 0, std::vector<T>(C * KK));
            parallel_for(g.N, [&](std::size_t n) {
                for (std::size_t c = 0; c < C; ++c) {
                    const T* gon = go + (n * C + c) * P;
                    const T* xin = nx->data.data() + (n * C + c) * g.H * g.W;
                    const T* wk = nw->data.data() + c * KK;
                    T* gxin = gx ? gx + (n * C + c) * g.H * g.W : nullptr;
                    for (std::size_t i = 0; i < g.kh; ++i)
                        for (std::size_t j = 0; j < g.kw; ++j) {
                            T acc = T(0);
                            const T k = wk[i * g.kw + j];
                            for (std::size_t oh = 0; oh < g.Ho; ++oh) {
                                const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + i) -
                                                          static_cast<std::ptrdiff_t>(g.pad);
                                if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.H)) continue;
                                for (std::size_t ow = 0; ow < g.Wo; ++ow) {
                                    const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + j) -
                                                              static_cast<std::ptrdiff_t>(g.pad);
                                    if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.W)) continue;
                                    const T gv = gon[oh * g.Wo + ow];
                                    acc += gv * xin[ih * g.W + iw];
                                    if (gxin) gxin[ih * g.W + iw] += gv * k;
                                }
                            }
                            if (gw) parts[n][c * KK + i * g.kw + j] = acc;
                        }
                }
            });
            if (gw) detail::reduce_partials(parts, gw);
            if (T* gb = grad_sink(nb))
                for (std::size_t n = 0; n < g.N; ++n)
                    for (std::size_t c = 0; c < C; ++c) {
                        T acc = T(0);
                        for (std::size_t p = 0; p < P; ++p) acc += go[(n * C + c) * P + p];
                        gb[c] += acc;
                    }
        });
}

// ---------------------------------------------------------------- conv1d

/// Single shared filter slid along the last axis of x [N,1,L]; w is [1,1,phi]
/// with phi odd, zero padding (phi-1)/2 so the length is preserved.
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
    detail::check_rank(x.shape(), 3, "conv1d input");
    detail::check_rank(w.shape(), 3, "conv1d weight");
    if (x.dim(1) != 1 || w.dim(0) != 1 || w.dim(1) != 1)
        throw ConfigError("conv1d: only single-channel [N,1,L] with [1,1,phi] kernels supported");
    const std::size_t phi = w.dim(2);
    if (phi % 2 == 0) throw ConfigError("conv1d: kernel length must be odd, got " + std::to_string(phi));
    const std::size_t N = x.dim(0), L = x.dim(2);
    const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(phi / 2);
    const T bias = b.defined() ? b[0] : T(0);
    std::vector<T> out(N * L);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t t = 0; t < L; ++t) {
            T acc = bias;
            for (std::size_t k = 0; k < phi; ++k) {
                const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + k) - half;
                if (s >= 0 && s < static_cast<std::ptrdiff_t>(L)) acc += w[k] * x[n * L + s];
            }
            out[n * L + t] = acc;
        }
    auto nx = x.node_ptr(), nw = w.node_ptr(), nb = b.defined() ? b.node_ptr() : nullptr;
    return make_result<T>({N, 1, L}, std::move(out), {x, w, b}, "conv1d", [nx, nw, nb, N, L, phi, half](Node<T>& o) {
        T* gx = grad_sink(nx);
        T* gw = grad_sink(nw);
        T* gb = grad_sink(nb);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t t = 0; t < L; ++t) {
                const T g = o.grad[n * L + t];
                if (gb) gb[0] += g;
                for (std::size_t k = 0; k < phi; ++k) {
                    const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + k) - half;
                    if (s < 0 || s >= static_cast<std::ptrdiff_t>(L)) continue;
                    if (gx) gx[n * L + s] += g * nw->data[k];
                    if (gw) gw[k] += g * nx->data[n * L + s];
                }
            }
    });
}

}  // namespace cvmh::ops
