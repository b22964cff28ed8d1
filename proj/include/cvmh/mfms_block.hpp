#pragma once

// Multi-frequency multi-scale fusion of an encoder feature F and a decoder
// feature Ft:
//   X = F + Ft,  w = sigmoid(G(X) + L(X)),  Z = w*F + (1-w)*Ft
// G: DCT frequency descriptors pooled over the frequency axis (avg/max/min),
//    each through its own adaptive-size conv1d over channels.
// L: point-wise bottleneck with batch norm.

#include <cmath>
#include <numbers>
#include <vector>

#include "module.hpp"

namespace cvmh {

struct FrequencySpec {
    std::size_t u = 0, v = 0;
    bool operator==(const FrequencySpec&) const = default;
};

/// Top-16 (u, v) selection on a 7x7 grid, strongest first.
inline std::vector<FrequencySpec> default_frequencies(std::size_t k = 16) {
    static const std::size_t us[] = {0, 0, 6, 0, 0, 1, 1, 4, 5, 1, 3, 0, 0, 0, 3, 2,
                                     4, 6, 3, 5, 5, 2, 6, 5, 5, 3, 3, 4, 2, 2, 6, 1};
    static const std::size_t vs[] = {0, 1, 0, 5, 2, 0, 2, 0, 0, 6, 0, 4, 6, 3, 5, 2,
                                     6, 3, 3, 3, 5, 1, 1, 2, 4, 2, 1, 1, 3, 0, 5, 3};
    if (k == 0 || k > 32) throw ConfigError("frequency count must be in [1, 32]");
    std::vector<FrequencySpec> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back({us[i], vs[i]});
    return out;
}

struct FrequencyConfig {
    std::vector<FrequencySpec> selection = default_frequencies(16);
    std::size_t basis_h = 7, basis_w = 7;

    std::size_t K() const { return selection.size(); }
    void validate() const {
        if (selection.empty()) throw ConfigError("frequency selection is empty");
        for (std::size_t i = 0; i < selection.size(); ++i)
            for (std::size_t j = i + 1; j < selection.size(); ++j)
                if (selection[i] == selection[j]) throw ConfigError("duplicate frequency in selection");
    }
};

struct AdaptiveKernelConfig {
    double alpha = 2.0;
    double beta = 1.0;
};

/// Nearest odd integer to log2(C)/alpha + beta/alpha; ties go to the smaller odd; at least 1.
inline std::size_t adaptive_kernel_size(std::size_t C, const AdaptiveKernelConfig& k = {}) {
    if (C == 0) throw ConfigError("adaptive_kernel_size: C must be >= 1");
    if (!(k.alpha > 0)) throw ConfigError("adaptive_kernel_size: alpha must be positive");
    const double lambda = std::log2(static_cast<double>(C)) / k.alpha + k.beta / k.alpha;
    const double lo = 2.0 * std::floor((lambda - 1.0) / 2.0) + 1.0;  // largest odd <= lambda
    const double hi = lo + 2.0;
    const double phi = (lambda - lo <= hi - lambda) ? lo : hi;
    return phi < 1.0 ? 1 : static_cast<std::size_t>(phi);
}

/// D[h,w] = cos(pi*h/H*(u+1/2)) * cos(pi*w/W*(v+1/2)), row-major [H,W].
template <typename T>
std::vector<T> dct_basis(std::size_t H, std::size_t W, const FrequencySpec& f) {
    if (H == 0 || W == 0) throw ConfigError("dct_basis: empty grid");
    constexpr double pi = std::numbers::pi;
    std::vector<T> out(H * W);
    for (std::size_t h = 0; h < H; ++h) {
        const double ch = std::cos(pi * static_cast<double>(h) / static_cast<double>(H) * (double(f.u) + 0.5));
        for (std::size_t w = 0; w < W; ++w)
            out[h * W + w] = static_cast<T>(
                ch * std::cos(pi * static_cast<double>(w) / static_cast<double>(W) * (double(f.v) + 0.5)));
    }
    return out;
}

/// All selected bases stacked as [K, H*W] (a constant, no gradient).
template <typename T>
Tensor<T> dct_bank(std::size_t H, std::size_t W, const FrequencyConfig& cfg) {
    std::vector<T> all;
    all.reserve(cfg.K() * H * W);
    for (const auto& f : cfg.selection) {
        auto b = dct_basis<T>(H, W, f);
        all.insert(all.end(), b.begin(), b.end());
    }
    return Tensor<T>::from({cfg.K(), H * W}, std::move(all));
}

/// out[n,c,k] = sum_{h,w} X[n,c,h,w] * D_k[h,w]
template <typename T>
Tensor<T> compress_frequencies(const Tensor<T>& X, const FrequencyConfig& cfg) {
    if (X.rank() != 4) throw ConfigError("compress_frequencies expects NCHW, got " + shape_str(X.shape()));
    const std::size_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
    return ops::linear(ops::reshape(X, {N, C, H * W}), dct_bank<T>(H, W, cfg));
}

/// Channel descriptor G(X) [N,C].
template <typename T>
class GlobalAttention {
   public:
    GlobalAttention() = default;
    GlobalAttention(const std::string& name, std::size_t C, const FrequencyConfig& fcfg,
                    const AdaptiveKernelConfig& kcfg, bool multi_frequency, bool adaptive_conv, Rng& rng)
        : fcfg_(fcfg), multi_frequency_(multi_frequency), adaptive_conv_(adaptive_conv) {
        fcfg_.validate();
        if (adaptive_conv_) {
            const std::size_t phi = adaptive_kernel_size(C, kcfg);
            conv_avg_ = Conv1d<T>(join_name(name, "conv_avg"), phi, rng);
            conv_max_ = Conv1d<T>(join_name(name, "conv_max"), phi, rng);
            conv_min_ = Conv1d<T>(join_name(name, "conv_min"), phi, rng);
            conv_avg_.zero_();
            conv_max_.zero_();
            conv_min_.zero_();
        } else {
            const std::size_t hidden = std::max<std::size_t>(1, C / 16);
            fc1_ = Linear<T>(join_name(name, "fc1"), C, hidden, true, rng);
            fc2_ = Linear<T>(join_name(name, "fc2"), hidden, C, true, rng);
            fc2_.zero_();
        }
    }

    /// avg / max / min descriptors, each [N,C].
    ops::GlobalPools<T> pools(const Tensor<T>& X) const {
        if (!multi_frequency_) return ops::global_pools(X);
        auto F = compress_frequencies(X, fcfg_);
        return {ops::reduce_axis(F, 2, ops::Reduce::Mean), ops::reduce_axis(F, 2, ops::Reduce::Max),
                ops::reduce_axis(F, 2, ops::Reduce::Min)};
    }

    Tensor<T> operator()(const Tensor<T>& X) const {
        auto p = pools(X);
        if (adaptive_conv_) return ops::add(ops::add(conv_avg_(p.avg), conv_max_(p.max)), conv_min_(p.min));
        auto mlp = [&](const Tensor<T>& v) { return fc2_.last(ops::relu(fc1_.last(v))); };
        return ops::add(ops::add(mlp(p.avg), mlp(p.max)), mlp(p.min));
    }

    void collect(ParamSet<T>& out) {
        if (adaptive_conv_) {
            conv_avg_.collect(out);
            conv_max_.collect(out);
            conv_min_.collect(out);
        } else {
            fc1_.collect(out);
            fc2_.collect(out);
        }
    }

    Conv1d<T>& conv_avg() { return conv_avg_; }
    Conv1d<T>& conv_max() { return conv_max_; }
    Conv1d<T>& conv_min() { return conv_min_; }
    const FrequencyConfig& frequencies() const { return fcfg_; }

   private:
    FrequencyConfig fcfg_;
    bool multi_frequency_ = true, adaptive_conv_ = true;
    Conv1d<T> conv_avg_, conv_max_, conv_min_;
    Linear<T> fc1_, fc2_;
};

/// L(X) = BN(pw2(ReLU(BN(pw1 X)))), [N,C,H,W].
template <typename T>
class LocalAttention {
   public:
    LocalAttention() = default;
    LocalAttention(const std::string& name, std::size_t C, std::size_t reduction, Rng& rng) {
        if (reduction == 0 || C % reduction)
            throw ConfigError("local attention: C=" + std::to_string(C) + " not divisible by " +
                              std::to_string(reduction));
        const std::size_t hidden = C / reduction;
        pw1_ = Linear<T>(join_name(name, "pw1"), C, hidden, true, rng);
        bn1_ = BatchNorm<T>(join_name(name, "bn1"), hidden);
        pw2_ = Linear<T>(join_name(name, "pw2"), hidden, C, true, rng);
        bn2_ = BatchNorm<T>(join_name(name, "bn2"), C);
        pw2_.zero_();
    }

    Tensor<T> operator()(const Tensor<T>& X, bool training) {
        auto h = ops::relu(bn1_(pw1_.channels(X), training));
        return bn2_(pw2_.channels(h), training);
    }

    void collect(ParamSet<T>& out) {
        pw1_.collect(out);
        bn1_.collect(out);
        pw2_.collect(out);
        bn2_.collect(out);
    }

    Linear<T>& pw1() { return pw1_; }
    Linear<T>& pw2() { return pw2_; }
    BatchNorm<T>& bn2() { return bn2_; }

   private:
    Linear<T> pw1_;
    BatchNorm<T> bn1_;
    Linear<T> pw2_;
    BatchNorm<T> bn2_;
};

struct MFMSConfig {
    std::size_t dim = 96;
    FrequencyConfig frequencies;
    AdaptiveKernelConfig kernel;
    std::size_t local_reduction = 4;
    bool multi_scale = true;      // local point-wise branch
    bool multi_frequency = true;  // DCT descriptors instead of spatial pooling
    bool adaptive_conv = true;    // conv1d instead of an FC bottleneck
};

template <typename T>
class MFMSBlock {
   public:
    MFMSBlock() = default;
    MFMSBlock(const std::string& name, const MFMSConfig& cfg, Rng& rng) : multi_scale_(cfg.multi_scale) {
        global_ = GlobalAttention<T>(join_name(name, "global"), cfg.dim, cfg.frequencies, cfg.kernel,
                                     cfg.multi_frequency, cfg.adaptive_conv, rng);
        if (multi_scale_) local_ = LocalAttention<T>(join_name(name, "local"), cfg.dim, cfg.local_reduction, rng);
    }

    /// Fusion weight w = sigmoid(G(X) + L(X)) for X = F + Ft, [N,C,H,W].
    Tensor<T> weights(const Tensor<T>& F, const Tensor<T>& Ft, bool training) {
        if (F.shape() != Ft.shape())
            throw ConfigError("mfms: feature shapes differ " + shape_str(F.shape()) + " vs " + shape_str(Ft.shape()));
        auto X = ops::add(F, Ft);
        auto G = ops::reshape(global_(X), {X.dim(0), X.dim(1), 1, 1});
        if (!multi_scale_) return ops::sigmoid(ops::add(G, Tensor<T>::zeros(X.shape())));
        return ops::sigmoid(ops::add(G, local_(X, training)));
    }

    /// Z = Ft + w * (F - Ft), i.e. w*F + (1-w)*Ft.
    Tensor<T> operator()(const Tensor<T>& F, const Tensor<T>& Ft, bool training) {
        auto w = weights(F, Ft, training);
        return ops::add(Ft, ops::mul(w, ops::sub(F, Ft)));
    }

    void collect(ParamSet<T>& out) {
        global_.collect(out);
        if (multi_scale_) local_.collect(out);
    }

    GlobalAttention<T>& global() { return global_; }
    LocalAttention<T>& local() { return local_; }

   private:
    bool multi_scale_ = true;
    GlobalAttention<T> global_;
    LocalAttention<T> local_;
};

}  // namespace cvmh
