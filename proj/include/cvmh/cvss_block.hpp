#pragma once

// Cross-scan visual state-space block: a global cross-scan SSM branch with
// channel attention, a convolutional local branch with spatial attention,
// a residual fusion and an efficient FFN.

#include <cmath>
#include <vector>

#include "selective_scan.hpp"

namespace cvmh {

struct CVSSConfig {
    std::size_t dim = 96;
    std::size_t ssm_expand = 2;
    std::size_t d_state = 16;
    std::size_t dt_rank = 0;  // 0: ceil(dim / 16)
    ScanMode scan_mode = ScanMode::CS2D;
    std::size_t ca_reduction = 4;
    double effn_ratio = 0.25;
    bool local_branch = true;
    bool zero_init = true;  // zero the output projections (identity at init)

    std::size_t d_inner() const { return ssm_expand * dim; }
    std::size_t rank() const { return dt_rank ? dt_rank : default_dt_rank(dim); }
    std::size_t effn_hidden() const {
        return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(effn_ratio * static_cast<double>(dim))));
    }
    std::size_t ca_hidden() const { return std::max<std::size_t>(1, dim / ca_reduction); }

    void validate() const {
        if (dim == 0) throw ConfigError("block dim must be positive");
        if (ca_reduction == 0 || dim % ca_reduction)
            throw ConfigError("dim " + std::to_string(dim) + " not divisible by ca_reduction " +
                              std::to_string(ca_reduction));
        if (ssm_expand == 0 || d_state == 0) throw ConfigError("ssm_expand and d_state must be positive");
        if (!(effn_ratio > 0)) throw ConfigError("effn_ratio must be positive");
    }
};

/// x + out_proj(LN(ssm(silu(dw(main)))) * silu(gate)), main/gate from LN(x).
template <typename T>
class CrossScan {
   public:
    CrossScan() = default;
    CrossScan(const std::string& name, const CVSSConfig& cfg, Rng& rng) : Di_(cfg.d_inner()) {
        norm_ = LayerNorm<T>(join_name(name, "norm"), cfg.dim);
        in_proj_ = Linear<T>(join_name(name, "in_proj"), cfg.dim, 2 * Di_, false, rng);
        dw_ = DepthwiseConv2d<T>(join_name(name, "dw"), Di_, 3, rng);
        ssm_ = DirectionalSsm<T>(join_name(name, "ssm"), Di_, cfg.d_state, cfg.rank(), cfg.scan_mode, rng);
        out_norm_ = LayerNorm<T>(join_name(name, "out_norm"), Di_);
        out_proj_ = Linear<T>(join_name(name, "out_proj"), Di_, cfg.dim, false, rng);
        if (cfg.zero_init) out_proj_.zero_();
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        auto z = in_proj_.channels(norm_.channels(x));
        auto main = ops::silu(dw_(ops::slice(z, 1, 0, Di_)));
        auto gate = ops::silu(ops::slice(z, 1, Di_, Di_));
        auto y = out_norm_.channels(ssm_(main));
        return ops::add(x, out_proj_.channels(ops::mul(y, gate)));
    }

    void collect(ParamSet<T>& out) {
        norm_.collect(out);
        in_proj_.collect(out);
        dw_.collect(out);
        ssm_.collect(out);
        out_norm_.collect(out);
        out_proj_.collect(out);
    }

    DirectionalSsm<T>& ssm() { return ssm_; }
    Linear<T>& out_proj() { return out_proj_; }

   private:
    std::size_t Di_ = 0;
    LayerNorm<T> norm_;
    Linear<T> in_proj_;
    DepthwiseConv2d<T> dw_;
    DirectionalSsm<T> ssm_;
    LayerNorm<T> out_norm_;
    Linear<T> out_proj_;
};

/// x * sigmoid(mlp(avgpool x) + mlp(maxpool x)), one shared bottleneck MLP.
template <typename T>
class ChannelAttention {
   public:
    ChannelAttention() = default;
    ChannelAttention(const std::string& name, std::size_t dim, std::size_t hidden, Rng& rng) {
        fc1_ = Linear<T>(join_name(name, "fc1"), dim, hidden, true, rng);
        fc2_ = Linear<T>(join_name(name, "fc2"), hidden, dim, true, rng);
    }

    Tensor<T> weights(const Tensor<T>& x) const {
        const std::size_t N = x.dim(0), C = x.dim(1);
        auto flat = ops::reshape(x, {N, C, x.numel() / (N * C)});
        auto avg = ops::reduce_axis(flat, 2, ops::Reduce::Mean);
        auto mx = ops::reduce_axis(flat, 2, ops::Reduce::Max);
        auto a = ops::add(mlp(avg), mlp(mx));
        return ops::sigmoid(a);
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        const std::size_t N = x.dim(0), C = x.dim(1);
        return ops::mul(x, ops::reshape(weights(x), {N, C, 1, 1}));
    }

    void zero_() {
        fc1_.zero_();
        fc2_.zero_();
    }

    void collect(ParamSet<T>& out) {
        fc1_.collect(out);
        fc2_.collect(out);
    }

    Linear<T>& fc1() { return fc1_; }
    Linear<T>& fc2() { return fc2_; }

   private:
    Tensor<T> mlp(const Tensor<T>& v) const { return fc2_.last(ops::relu(fc1_.last(v))); }
    Linear<T> fc1_, fc2_;
};

/// x * sigmoid(conv7x7([mean_c x, max_c x])).
template <typename T>
class SpatialAttention {
   public:
    SpatialAttention() = default;
    SpatialAttention(const std::string& name, Rng& rng) : conv_(join_name(name, "conv"), 2, 1, 7, 1, 3, true, rng) {}

    Tensor<T> mask(const Tensor<T>& x) const {
        auto mean = ops::reduce_axis(x, 1, ops::Reduce::Mean, true);
        auto mx = ops::reduce_axis(x, 1, ops::Reduce::Max, true);
        return ops::sigmoid(conv_(ops::concat<T>({mean, mx}, 1)));
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return ops::mul(x, mask(x)); }

    void zero_() { conv_.zero_(); }
    void collect(ParamSet<T>& out) { conv_.collect(out); }

   private:
    Conv2d<T> conv_;
};

/// LN -> pw C->h -> dw3x3 -> GELU -> pw h->C (the residual is added by the caller).
template <typename T>
class EFFN {
   public:
    EFFN() = default;
    EFFN(const std::string& name, std::size_t dim, std::size_t hidden, bool zero_init, Rng& rng) {
        norm_ = LayerNorm<T>(join_name(name, "norm"), dim);
        pw1_ = Linear<T>(join_name(name, "pw1"), dim, hidden, true, rng);
        dw_ = DepthwiseConv2d<T>(join_name(name, "dw"), hidden, 3, rng);
        pw2_ = Linear<T>(join_name(name, "pw2"), hidden, dim, true, rng);
        if (zero_init) pw2_.zero_();
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        return pw2_.channels(ops::gelu(dw_(pw1_.channels(norm_.channels(x)))));
    }

    void collect(ParamSet<T>& out) {
        norm_.collect(out);
        pw1_.collect(out);
        dw_.collect(out);
        pw2_.collect(out);
    }

    Linear<T>& pw2() { return pw2_; }

   private:
    LayerNorm<T> norm_;
    Linear<T> pw1_;
    DepthwiseConv2d<T> dw_;
    Linear<T> pw2_;
};

template <typename T>
class CVSSBlock {
   public:
    CVSSBlock() = default;
    CVSSBlock(const std::string& name, const CVSSConfig& cfg, Rng& rng) : local_(cfg.local_branch) {
        cfg.validate();
        cs_ = CrossScan<T>(join_name(name, "cs"), cfg, rng);
        ca_ = ChannelAttention<T>(join_name(name, "ca"), cfg.dim, cfg.ca_hidden(), rng);
        if (local_) {
            local_conv_ = DepthwiseConv2d<T>(join_name(name, "local_conv"), cfg.dim, 3, rng);
            sa_ = SpatialAttention<T>(join_name(name, "sa"), rng);
        }
        fuse_dw_ = DepthwiseConv2d<T>(join_name(name, "fuse_dw"), cfg.dim, 3, rng);
        fuse_norm_ = LayerNorm<T>(join_name(name, "fuse_norm"), cfg.dim);
        fuse_proj_ = Linear<T>(join_name(name, "fuse_proj"), cfg.dim, cfg.dim, true, rng);
        if (cfg.zero_init) fuse_proj_.zero_();
        effn_ = EFFN<T>(join_name(name, "effn"), cfg.dim, cfg.effn_hidden(), cfg.zero_init, rng);
    }

    Tensor<T> global(const Tensor<T>& x) const { return ca_(cs_(x)); }
    Tensor<T> local(const Tensor<T>& x) const { return sa_(local_conv_(x)); }

    Tensor<T> operator()(const Tensor<T>& x) const {
        auto mixed = local_ ? ops::add(global(x), local(x)) : global(x);
        auto fu = ops::add(x, fuse_proj_.channels(fuse_norm_.channels(fuse_dw_(mixed))));
        return ops::add(fu, effn_(fu));
    }

    void collect(ParamSet<T>& out) {
        cs_.collect(out);
        ca_.collect(out);
        if (local_) {
            local_conv_.collect(out);
            sa_.collect(out);
        }
        fuse_dw_.collect(out);
        fuse_norm_.collect(out);
        fuse_proj_.collect(out);
        effn_.collect(out);
    }

    CrossScan<T>& cross_scan() { return cs_; }
    ChannelAttention<T>& channel_attention() { return ca_; }
    SpatialAttention<T>& spatial_attention() { return sa_; }
    EFFN<T>& effn() { return effn_; }
    Linear<T>& fuse_proj() { return fuse_proj_; }

   private:
    bool local_ = true;
    CrossScan<T> cs_;
    ChannelAttention<T> ca_;
    DepthwiseConv2d<T> local_conv_;
    SpatialAttention<T> sa_;
    DepthwiseConv2d<T> fuse_dw_;
    LayerNorm<T> fuse_norm_;
    Linear<T> fuse_proj_;
    EFFN<T> effn_;
};

/// x + b(a(x))
template <typename T>
Tensor<T> paired_blocks(const Tensor<T>& x, const CVSSBlock<T>& a, const CVSSBlock<T>& b) {
    return ops::add(x, b(a(x)));
}

/// A run of blocks. With paired residuals, consecutive pairs are wrapped in
/// x + b(a(x)); a trailing odd block runs unpaired.
template <typename T>
class CVSSStage {
   public:
    CVSSStage() = default;
    CVSSStage(const std::string& name, const CVSSConfig& cfg, std::size_t depth, bool paired, Rng& rng)
        : paired_(paired) {
        for (std::size_t i = 0; i < depth; ++i)
            blocks_.emplace_back(join_name(name, "block" + std::to_string(i)), cfg, rng);
    }

    Tensor<T> operator()(Tensor<T> x) const {
        std::size_t i = 0;
        if (paired_)
            for (; i + 1 < blocks_.size(); i += 2) x = paired_blocks(x, blocks_[i], blocks_[i + 1]);
        for (; i < blocks_.size(); ++i) x = blocks_[i](x);
        return x;
    }

    void collect(ParamSet<T>& out) {
        for (auto& b : blocks_) b.collect(out);
    }

    std::size_t depth() const { return blocks_.size(); }
    CVSSBlock<T>& block(std::size_t i) { return blocks_.at(i); }

   private:
    bool paired_ = true;
    std::vector<CVSSBlock<T>> blocks_;
};

}  // namespace cvmh
