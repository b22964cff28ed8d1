#pragma once

#include <cmath>
#include <vector>

#include "ops.hpp"

namespace cvmh::ops {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Layer normalization over one axis (the channel axis of NCHW maps, or the
/// last axis of token matrices), followed by the per-feature affine gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, std::size_t axis) {
    std::size_t outer, n, inner;
    detail::split_axis(x.shape(), axis, outer, n, inner);
    if (n == 0) throw ConfigError("layer_norm over empty axis");
    if (gamma.numel() != n || beta.numel() != n)
        throw ConfigError("layer_norm: affine size " + std::to_string(gamma.numel()) + " vs axis extent " +
                          std::to_string(n));
    const T eps = T(kLayerNormEps);
    std::vector<T> out(x.numel()), xhat(x.numel()), rstd(outer * inner);
    const auto& xv = x.values();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n * inner + i;
            T mu = T(0);
            for (std::size_t k = 0; k < n; ++k) mu += xv[base + k * inner];
            mu /= static_cast<T>(n);
            T var = T(0);
            for (std::size_t k = 0; k < n; ++k) {
                const T d = xv[base + k * inner] - mu;
                var += d * d;
            }
            var /= static_cast<T>(n);
            const T r = T(1) / std::sqrt(var + eps);
            rstd[o * inner + i] = r;
            for (std::size_t k = 0; k < n; ++k) {
                const std::size_t idx = base + k * inner;
                xhat[idx] = (xv[idx] - mu) * r;
                out[idx] = xhat[idx] * gamma[k] + beta[k];
            }
        }
    auto nx = x.node_ptr(), ng = gamma.node_ptr(), nb = beta.node_ptr();
    return make_result<T>(
        x.shape(), std::move(out), {x, gamma, beta}, "layer_norm",
        [nx, ng, nb, outer, n, inner, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& o) {
            T* gx = grad_sink(nx);
            T* gg = grad_sink(ng);
            T* gb = grad_sink(nb);
            for (std::size_t a = 0; a < outer; ++a)
                for (std::size_t i = 0; i < inner; ++i) {
                    const std::size_t base = a * n * inner + i;
                    T sum_g = T(0), sum_gx = T(0);
                    for (std::size_t k = 0; k < n; ++k) {
                        const std::size_t idx = base + k * inner;
                        const T go = o.grad[idx];
                        if (gg) gg[k] += go * xhat[idx];
                        if (gb) gb[k] += go;
                        const T gh = go * ng->data[k];
                        sum_g += gh;
                        sum_gx += gh * xhat[idx];
                    }
                    if (!gx) continue;
                    const T r = rstd[a * inner + i];
                    const T inv_n = T(1) / static_cast<T>(n);
                    for (std::size_t k = 0; k < n; ++k) {
                        const std::size_t idx = base + k * inner;
                        const T gh = o.grad[idx] * ng->data[k];
                        gx[idx] += r * (gh - inv_n * sum_g - xhat[idx] * inv_n * sum_gx);
                    }
                }
        });
}

/// Running statistics of a batch-norm layer (not trainable).
template <typename T>
struct BatchNormStats {
    std::vector<T> mean, var;
    explicit BatchNormStats(std::size_t c = 0) : mean(c, T(0)), var(c, T(1)) {}
};

/// Batch normalization over [N,C,...] per channel. Training mode normalizes
/// with batch statistics (biased variance) and updates the running stats with
/// momentum 0.1 (unbiased variance); evaluation mode uses the running stats.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormStats<T>& stats,
                     bool training) {
    if (x.rank() < 2) throw ConfigError("batch_norm expects [N,C,...], got " + shape_str(x.shape()));
    const std::size_t N = x.dim(0), C = x.dim(1);
    const std::size_t S = x.numel() / (N * C);
    if (gamma.numel() != C || beta.numel() != C || stats.mean.size() != C)
        throw ConfigError("batch_norm: channel count mismatch");
    const std::size_t M = N * S;
    if (training && M == 0) throw ConfigError("batch_norm: empty batch in training mode");
    const T eps = T(kBatchNormEps);
    const T momentum = T(kBatchNormMomentum);
    std::vector<T> out(x.numel()), xhat(x.numel()), rstd(C);
    const auto& xv = x.values();
    for (std::size_t c = 0; c < C; ++c) {
        T mu, var;
        if (training) {
            mu = T(0);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t s = 0; s < S; ++s) mu += xv[(n * C + c) * S + s];
            mu /= static_cast<T>(M);
            var = T(0);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t s = 0; s < S; ++s) {
                    const T d = xv[(n * C + c) * S + s] - mu;
                    var += d * d;
                }
            var /= static_cast<T>(M);
            const T unbiased = M > 1 ? var * static_cast<T>(M) / static_cast<T>(M - 1) : var;
            stats.mean[c] = (T(1) - momentum) * stats.mean[c] + momentum * mu;
            stats.var[c] = (T(1) - momentum) * stats.var[c] + momentum * unbiased;
        } else {
            mu = stats.mean[c];
            var = stats.var[c];
        }
        const T r = T(1) / std::sqrt(var + eps);
        rstd[c] = r;
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t s = 0; s < S; ++s) {
                const std::size_t idx = (n * C + c) * S + s;
                xhat[idx] = (xv[idx] - mu) * r;
                out[idx] = xhat[idx] * gamma[c] + beta[c];
            }
    }
    auto nx = x.node_ptr(), ng = gamma.node_ptr(), nb = beta.node_ptr();
    return make_result<T>(
        x.shape(), std::move(out), {x, gamma, beta}, "batch_norm",
        [nx, ng, nb, N, C, S, M, training, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& o) {
            T* gx = grad_sink(nx);
            T* gg = grad_sink(ng);
            T* gb = grad_sink(nb);
            for (std::size_t c = 0; c < C; ++c) {
                T sum_g = T(0), sum_gx = T(0);
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t s = 0; s < S; ++s) {
                        const std::size_t idx = (n * C + c) * S + s;
                        sum_g += o.grad[idx];
                        sum_gx += o.grad[idx] * xhat[idx];
                    }
                if (gg) gg[c] += sum_gx;
                if (gb) gb[c] += sum_g;
                if (!gx) continue;
                const T scale = ng->data[c] * rstd[c];
                const T inv_m = T(1) / static_cast<T>(M);
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t s = 0; s < S; ++s) {
                        const std::size_t idx = (n * C + c) * S + s;
                        gx[idx] += training ? scale * (o.grad[idx] - inv_m * sum_g - xhat[idx] * inv_m * sum_gx)
                                            : scale * o.grad[idx];
                    }
            }
        });
}

}  // namespace cvmh::ops
