#pragma once

// Pixel-wise cross-entropy and soft Dice over [N,K,H,W] logits.

#include <cmath>
#include <cstdint>
#include <iostream>
#include <span>
#include <vector>

#include "ops.hpp"

namespace cvmh {

struct LossConfig {
    double ce_weight = 1.0;
    double dice_weight = 1.0;
    double dice_smooth = 1.0;
    int ignore_index = -1;  // < 0: none

    void validate() const {
        if (ce_weight < 0 || dice_weight < 0 || (ce_weight == 0 && dice_weight == 0))
            throw ConfigError("loss weights must be >= 0 and not both zero");
        if (dice_smooth < 0) throw ConfigError("dice_smooth must be >= 0");
    }
};

namespace detail {

template <typename T>
struct PixelLayout {
    std::size_t N, K, P;  // P pixels per image
};

template <typename T>
PixelLayout<T> check_labels(const Tensor<T>& logits, std::span<const std::int32_t> labels, int ignore) {
    if (logits.rank() != 4) throw ConfigError("loss expects logits [N,K,H,W], got " + shape_str(logits.shape()));
    const std::size_t N = logits.dim(0), K = logits.dim(1), P = logits.dim(2) * logits.dim(3);
    if (labels.size() != N * P)
        throw ConfigError("label count " + std::to_string(labels.size()) + " does not match logits " +
                          shape_str(logits.shape()));
    for (const auto l : labels)
        if (l != ignore && (l < 0 || static_cast<std::size_t>(l) >= K))
            throw ConfigError("label " + std::to_string(l) + " outside [0," + std::to_string(K) + ")");
    return {N, K, P};
}

/// Softmax over the class axis, [N,K,P] layout.
template <typename T>
std::vector<T> softmax_classes(const std::vector<T>& z, std::size_t N, std::size_t K, std::size_t P) {
    std::vector<T> p(z.size());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < P; ++i) {
            const std::size_t base = n * K * P + i;
            T mx = z[base];
            for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, z[base + k * P]);
            T s = T(0);
            for (std::size_t k = 0; k < K; ++k) s += (p[base + k * P] = std::exp(z[base + k * P] - mx));
            for (std::size_t k = 0; k < K; ++k) p[base + k * P] /= s;
        }
    return p;
}

}  // namespace detail

/// Mean over non-ignored pixels of -log softmax(logits)[label]. Zero (with a
/// warning) when every pixel is ignored.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels, int ignore_index = -1) {
    const auto [N, K, P] = detail::check_labels(logits, labels, ignore_index);
    const auto& z = logits.values();
    std::vector<T> lse(N * P);
    T total = T(0);
    std::size_t count = 0;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < P; ++i) {
            const std::size_t base = n * K * P + i;
            T mx = z[base];
            for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, z[base + k * P]);
            T s = T(0);
            for (std::size_t k = 0; k < K; ++k) s += std::exp(z[base + k * P] - mx);
            lse[n * P + i] = mx + std::log(s);
            const int l = labels[n * P + i];
            if (l == ignore_index) continue;
            total += lse[n * P + i] - z[base + static_cast<std::size_t>(l) * P];
            ++count;
        }
    if (count == 0) std::cerr << "warning: cross_entropy over an all-ignored batch, loss defined as 0\n";
    const T inv = count ? T(1) / static_cast<T>(count) : T(0);
    auto nz = logits.node_ptr();
    std::vector<std::int32_t> lab(labels.begin(), labels.end());
    return make_result<T>({1}, {total * inv}, {logits}, "cross_entropy",
                          [nz, lab = std::move(lab), lse = std::move(lse), N, K, P, inv, ignore_index](Node<T>& o) {
                              T* g = grad_sink(nz);
                              if (!g) return;
                              const T go = o.grad[0] * inv;
                              for (std::size_t n = 0; n < N; ++n)
                                  for (std::size_t i = 0; i < P; ++i) {
                                      const int l = lab[n * P + i];
                                      if (l == ignore_index) continue;
                                      const std::size_t base = n * K * P + i;
                                      for (std::size_t k = 0; k < K; ++k) {
                                          const T p = std::exp(nz->data[base + k * P] - lse[n * P + i]);
                                          g[base + k * P] += go * (p - (static_cast<int>(k) == l ? T(1) : T(0)));
                                      }
                                  }
                          });
}

/// 1 - mean_k (2 sum p_k y_k + eps) / (sum p_k + sum y_k + eps), with sums over
/// non-ignored pixels of the whole batch.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& logits, std::span<const std::int32_t> labels, T eps = T(1),
                    int ignore_index = -1) {
    const auto [N, K, P] = detail::check_labels(logits, labels, ignore_index);
    auto p = detail::softmax_classes(logits.values(), N, K, P);
    std::vector<T> I(K, T(0)), Ps(K, T(0)), Y(K, T(0));
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < P; ++i) {
            const int l = labels[n * P + i];
            if (l == ignore_index) continue;
            for (std::size_t k = 0; k < K; ++k) Ps[k] += p[(n * K + k) * P + i];
            I[static_cast<std::size_t>(l)] += p[(n * K + static_cast<std::size_t>(l)) * P + i];
            Y[static_cast<std::size_t>(l)] += T(1);
        }
    T mean_dice = T(0);
    for (std::size_t k = 0; k < K; ++k) mean_dice += (T(2) * I[k] + eps) / (Ps[k] + Y[k] + eps);
    mean_dice /= static_cast<T>(K);
    auto nz = logits.node_ptr();
    std::vector<std::int32_t> lab(labels.begin(), labels.end());
    return make_result<T>(
        {1}, {T(1) - mean_dice}, {logits}, "dice_loss",
        [nz, lab = std::move(lab), p = std::move(p), I, Ps, Y, eps, N, K, P, ignore_index](Node<T>& o) {
            T* g = grad_sink(nz);
            if (!g) return;
            const T go = o.grad[0];
            std::vector<T> gp(K);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < P; ++i) {
                    const int l = lab[n * P + i];
                    if (l == ignore_index) continue;
                    T dot = T(0);
                    for (std::size_t k = 0; k < K; ++k) {
                        const T den = Ps[k] + Y[k] + eps;
                        const T y = static_cast<int>(k) == l ? T(1) : T(0);
                        gp[k] = -go / static_cast<T>(K) * (T(2) * y * den - (T(2) * I[k] + eps)) / (den * den);
                        dot += gp[k] * p[(n * K + k) * P + i];
                    }
                    for (std::size_t k = 0; k < K; ++k) {
                        const std::size_t idx = (n * K + k) * P + i;
                        g[idx] += p[idx] * (gp[k] - dot);
                    }
                }
        });
}

template <typename T>
struct LossParts {
    Tensor<T> total;
    double ce = 0, dice = 0;
};

template <typename T>
LossParts<T> segmentation_loss(const Tensor<T>& logits, std::span<const std::int32_t> labels, const LossConfig& cfg) {
    LossParts<T> out;
    Tensor<T> total;
    if (cfg.ce_weight > 0) {
        auto ce = cross_entropy(logits, labels, cfg.ignore_index);
        out.ce = static_cast<double>(ce.item());
        total = cfg.ce_weight == 1.0 ? ce : ops::scale(ce, static_cast<T>(cfg.ce_weight));
    }
    if (cfg.dice_weight > 0) {
        auto d = dice_loss(logits, labels, static_cast<T>(cfg.dice_smooth), cfg.ignore_index);
        out.dice = static_cast<double>(d.item());
        auto wd = cfg.dice_weight == 1.0 ? d : ops::scale(d, static_cast<T>(cfg.dice_weight));
        total = total.defined() ? ops::add(total, wd) : wd;
    }
    out.total = total;
    return out;
}

}  // namespace cvmh
