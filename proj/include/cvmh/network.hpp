#pragma once

// The U-shaped segmentation network: 4x4 patch embedding, four encoder
// stages joined by patch merging, four decoder levels that expand, fuse the
// matching encoder skip and refine, then a 4x expansion and class projection.

#include <memory>
#include <vector>

#include "complexity.hpp"

namespace cvmh {

/// space_to_depth(2) -> LN(4D) -> linear 4D -> 2D
template <typename T>
class PatchMerge {
   public:
    PatchMerge() = default;
    PatchMerge(const std::string& name, std::size_t D, Rng& rng)
        : norm_(join_name(name, "norm"), 4 * D), proj_(join_name(name, "proj"), 4 * D, 2 * D, false, rng) {}

    Tensor<T> operator()(const Tensor<T>& x) const {
        return proj_.channels(norm_.channels(ops::space_to_depth2(x)));
    }

    void collect(ParamSet<T>& out) {
        norm_.collect(out);
        proj_.collect(out);
    }

   private:
    LayerNorm<T> norm_;
    Linear<T> proj_;
};

/// linear D -> 2D -> depth_to_space(2) -> LN(D/2)
template <typename T>
class PatchExpand {
   public:
    PatchExpand() = default;
    PatchExpand(const std::string& name, std::size_t D, Rng& rng)
        : proj_(join_name(name, "proj"), D, 2 * D, false, rng), norm_(join_name(name, "norm"), D / 2) {
        if (D % 2) throw ConfigError("patch_expand needs an even channel count, got " + std::to_string(D));
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        return norm_.channels(ops::depth_to_space2(proj_.channels(x)));
    }

    void collect(ParamSet<T>& out) {
        proj_.collect(out);
        norm_.collect(out);
    }

   private:
    Linear<T> proj_;
    LayerNorm<T> norm_;
};

template <typename T>
class CvmhUNet {
   public:
    CvmhUNet(const NetworkConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(seed);
        const std::size_t C = cfg_.embed_dim;
        embed_ = Conv2d<T>("embed.conv", cfg_.in_channels, C, 4, 4, 0, true, rng);
        embed_norm_ = LayerNorm<T>("embed.norm", C);
        for (std::size_t i = 0; i < 4; ++i) {
            const std::size_t D = cfg_.stage_dim(i);
            encoder_.emplace_back("enc" + std::to_string(i), cfg_.block_config(D), cfg_.enc_depths[i],
                                  cfg_.paired_residual, rng);
            if (i < 3) merges_.emplace_back("merge" + std::to_string(i), D, rng);
        }
        for (std::size_t j = 0; j < 4; ++j) {
            const std::size_t i = 3 - j;
            const std::size_t D = cfg_.stage_dim(i);
            const std::string name = "dec" + std::to_string(j);
            if (j > 0) expands_.emplace_back(join_name(name, "expand"), cfg_.stage_dim(i + 1), rng);
            if (cfg_.mfms_enabled) fusions_.emplace_back(join_name(name, "mfms"), cfg_.mfms_config(D), rng);
            decoder_.emplace_back(join_name(name, "stage"), cfg_.block_config(D), cfg_.dec_depths[j],
                                  cfg_.paired_residual, rng);
        }
        final_expand_[0] = PatchExpand<T>("head.expand0", C, rng);
        final_expand_[1] = PatchExpand<T>("head.expand1", C / 2, rng);
        head_ = Linear<T>("head.proj", C / 4, cfg_.num_classes, true, rng);
        collect(params_);
        params_.check_unique();
    }

    // Parameter pointers refer into this object.
    CvmhUNet(const CvmhUNet&) = delete;
    CvmhUNet& operator=(const CvmhUNet&) = delete;

    /// x [N,in,H,W] -> logits [N,K,H,W]
    Tensor<T> forward(const Tensor<T>& x, bool training) {
        if (x.rank() != 4 || x.dim(1) != cfg_.in_channels)
            throw ConfigError("network input must be [N," + std::to_string(cfg_.in_channels) + ",H,W], got " +
                              shape_str(x.shape()));
        cfg_.validate_input(x.dim(2), x.dim(3));
        std::array<Tensor<T>, 4> skips;
        Tensor<T> h = embed_norm_.channels(embed_(x));
        for (std::size_t i = 0; i < 4; ++i) {
            if (i > 0) h = merges_[i - 1](h);
            skips[i] = h;
            h = encoder_[i](h);
        }
        for (std::size_t j = 0; j < 4; ++j) {
            const std::size_t i = 3 - j;
            if (j > 0) h = expands_[j - 1](h);
            h = cfg_.mfms_enabled ? fusions_[j](skips[i], h, training) : ops::add(skips[i], h);
            h = decoder_[j](h);
        }
        h = final_expand_[1](final_expand_[0](h));
        return head_.channels(h);
    }

    ParamSet<T>& params() { return params_; }
    const NetworkConfig& config() const { return cfg_; }
    std::size_t param_total() const { return params_.count(); }

    CVSSStage<T>& encoder_stage(std::size_t i) { return encoder_.at(i); }
    CVSSStage<T>& decoder_stage(std::size_t j) { return decoder_.at(j); }
    MFMSBlock<T>& fusion(std::size_t j) { return fusions_.at(j); }

   private:
    void collect(ParamSet<T>& out) {
        embed_.collect(out);
        embed_norm_.collect(out);
        for (std::size_t i = 0; i < 4; ++i) {
            encoder_[i].collect(out);
            if (i < 3) merges_[i].collect(out);
        }
        for (std::size_t j = 0; j < 4; ++j) {
            if (j > 0) expands_[j - 1].collect(out);
            if (cfg_.mfms_enabled) fusions_[j].collect(out);
            decoder_[j].collect(out);
        }
        final_expand_[0].collect(out);
        final_expand_[1].collect(out);
        head_.collect(out);
    }

    NetworkConfig cfg_;
    Conv2d<T> embed_;
    LayerNorm<T> embed_norm_;
    std::vector<CVSSStage<T>> encoder_;
    std::vector<PatchMerge<T>> merges_;
    std::vector<PatchExpand<T>> expands_;
    std::vector<MFMSBlock<T>> fusions_;
    std::vector<CVSSStage<T>> decoder_;
    std::array<PatchExpand<T>, 2> final_expand_;
    Linear<T> head_;
    ParamSet<T> params_;
};

}  // namespace cvmh
