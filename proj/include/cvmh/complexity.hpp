#pragma once

// Network configuration, stage plan and analytic parameter / MAC counters.
// The counters walk the same architecture the modules build, without
// allocating tensors; param_count must equal the registered parameter total.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cvss_block.hpp"
#include "mfms_block.hpp"

namespace cvmh {

struct NetworkConfig {
    std::size_t embed_dim = 96;
    std::size_t in_channels = 3;
    std::size_t num_classes = 6;
    std::array<std::size_t, 4> enc_depths{2, 2, 2, 2};
    std::array<std::size_t, 4> dec_depths{2, 2, 2, 1};  // deepest level first
    ScanMode scan_mode = ScanMode::CS2D;
    bool mfms_enabled = true;
    std::size_t input_h = 256, input_w = 256;

    std::size_t ssm_expand = 2;
    std::size_t d_state = 16;
    std::size_t ca_reduction = 4;
    double effn_ratio = 0.25;
    bool local_branch = true;
    bool paired_residual = true;
    bool zero_init = true;

    FrequencyConfig frequencies;
    AdaptiveKernelConfig kernel;
    std::size_t mfms_reduction = 4;
    bool mfms_multi_scale = true;
    bool mfms_multi_frequency = true;
    bool mfms_adaptive_conv = true;

    std::size_t stage_dim(std::size_t i) const { return embed_dim << i; }

    CVSSConfig block_config(std::size_t dim) const {
        CVSSConfig c;
        c.dim = dim;
        c.ssm_expand = ssm_expand;
        c.d_state = d_state;
        c.scan_mode = scan_mode;
        c.ca_reduction = ca_reduction;
        c.effn_ratio = effn_ratio;
        c.local_branch = local_branch;
        c.zero_init = zero_init;
        return c;
    }

    MFMSConfig mfms_config(std::size_t dim) const {
        MFMSConfig m;
        m.dim = dim;
        m.frequencies = frequencies;
        m.kernel = kernel;
        m.local_reduction = mfms_reduction;
        m.multi_scale = mfms_multi_scale;
        m.multi_frequency = mfms_multi_frequency;
        m.adaptive_conv = mfms_adaptive_conv;
        return m;
    }

    void validate_input(std::size_t H, std::size_t W) const {
        if (H == 0 || W == 0 || H % 32 || W % 32)
            throw ConfigError("input " + std::to_string(H) + "x" + std::to_string(W) + " must be divisible by 32");
    }

    void validate() const {
        if (embed_dim == 0 || embed_dim % 4)
            throw ConfigError("embed_dim must be a positive multiple of 4, got " + std::to_string(embed_dim));
        if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
        if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
        validate_input(input_h, input_w);
        for (std::size_t i = 0; i < 4; ++i) {
            block_config(stage_dim(i)).validate();
            if (mfms_enabled && mfms_multi_scale && stage_dim(i) % mfms_reduction)
                throw ConfigError("stage dim " + std::to_string(stage_dim(i)) + " not divisible by mfms_reduction");
        }
        frequencies.validate();
    }
};

/// Per-stage resolution and width for an input size.
struct StagePlan {
    struct Stage {
        std::size_t dim, h, w;
    };
    std::array<Stage, 4> stages;

    static StagePlan of(const NetworkConfig& cfg, std::size_t H, std::size_t W) {
        cfg.validate_input(H, W);
        StagePlan p;
        for (std::size_t i = 0; i < 4; ++i) p.stages[i] = {cfg.stage_dim(i), (H / 4) >> i, (W / 4) >> i};
        return p;
    }
};

struct Complexity {
    std::uint64_t params = 0;
    std::uint64_t macs = 0;       // convolution and linear layers
    std::uint64_t scan_macs = 0;  // selective-scan recurrence, 3 per token*channel*state*direction

    /// Headline figure: conv/linear multiply-accumulates.
    std::uint64_t flops() const { return macs; }
    std::uint64_t flops_2x() const { return 2 * macs; }

    Complexity& operator+=(const Complexity& o) {
        params += o.params;
        macs += o.macs;
        scan_macs += o.scan_macs;
        return *this;
    }
};

namespace count {

using u64 = std::uint64_t;

inline Complexity cvss_block(const CVSSConfig& c, u64 L) {
    const u64 D = c.dim, Di = c.d_inner(), Ns = c.d_state, R = c.rank(), hc = c.ca_hidden(), h = c.effn_hidden();
    Complexity k;
    // cross-scan
    k.params += 2 * D + 2 * Di * D + 10 * Di;
    k.macs += 2 * Di * D * L + 9 * Di * L;
    k.params += 4 * (Di * (R + 2 * Ns) + R * Di + Di + Di * Ns + Di);
    k.macs += 4 * (Di * (R + 2 * Ns) + R * Di) * L;
    k.scan_macs += 4 * 3 * L * Di * Ns;
    k.params += 2 * Di + D * Di;
    k.macs += D * Di * L;
    // channel attention (two pooled vectors through one MLP)
    k.params += D * hc + hc + hc * D + D;
    k.macs += 2 * (D * hc + hc * D);
    if (c.local_branch) {
        k.params += 10 * D + 2 * 49 + 1;
        k.macs += 9 * D * L + 2 * 49 * L;
    }
    // fusion
    k.params += 10 * D + 2 * D + D * D + D;
    k.macs += 9 * D * L + D * D * L;
    // E-FFN
    k.params += 2 * D + D * h + h + 10 * h + h * D + D;
    k.macs += D * h * L + 9 * h * L + h * D * L;
    return k;
}

inline Complexity mfms_block(const MFMSConfig& m, u64 L) {
    const u64 D = m.dim;
    Complexity k;
    if (m.adaptive_conv) {
        const u64 phi = adaptive_kernel_size(m.dim, m.kernel);
        k.params += 3 * (phi + 1);
        k.macs += 3 * phi * D;
    } else {
        const u64 hf = std::max<u64>(1, D / 16);
        k.params += D * hf + hf + hf * D + D;
        k.macs += 3 * (D * hf + hf * D);
    }
    if (m.multi_frequency) k.macs += m.frequencies.K() * L * D;
    if (m.multi_scale) {
        const u64 q = D / m.local_reduction;
        k.params += D * q + q + 2 * q + q * D + D + 2 * D;
        k.macs += 2 * D * q * L;
    }
    return k;
}

/// space_to_depth -> LN(4D) -> linear 4D->2D; L_out tokens after merging.
inline Complexity patch_merge(u64 D, u64 L_out) { return {8 * D + 8 * D * D, 8 * D * D * L_out, 0}; }

/// linear D->2D -> depth_to_space -> LN(D/2); L_in tokens before expanding.
inline Complexity patch_expand(u64 D, u64 L_in) { return {2 * D * D + D, 2 * D * D * L_in, 0}; }

}  // namespace count

/// Analytic parameter and MAC count for one forward pass at H x W (batch 1).
inline Complexity complexity(const NetworkConfig& cfg, std::size_t H, std::size_t W) {
    cfg.validate();
    const auto plan = StagePlan::of(cfg, H, W);
    using count::u64;
    Complexity k;
    const u64 C = cfg.embed_dim;
    const u64 L0 = u64(plan.stages[0].h) * plan.stages[0].w;
    k += {cfg.in_channels * 16 * C + C + 2 * C, cfg.in_channels * 16 * C * L0, 0};
    for (std::size_t i = 0; i < 4; ++i) {
        const u64 L = u64(plan.stages[i].h) * plan.stages[i].w;
        for (std::size_t b = 0; b < cfg.enc_depths[i]; ++b) k += count::cvss_block(cfg.block_config(cfg.stage_dim(i)), L);
        if (i < 3) k += count::patch_merge(cfg.stage_dim(i), u64(plan.stages[i + 1].h) * plan.stages[i + 1].w);
    }
    for (std::size_t j = 0; j < 4; ++j) {
        const std::size_t i = 3 - j;
        const u64 L = u64(plan.stages[i].h) * plan.stages[i].w;
        if (j > 0) k += count::patch_expand(cfg.stage_dim(i + 1), u64(plan.stages[i + 1].h) * plan.stages[i + 1].w);
        if (cfg.mfms_enabled) k += count::mfms_block(cfg.mfms_config(cfg.stage_dim(i)), L);
        for (std::size_t b = 0; b < cfg.dec_depths[j]; ++b) k += count::cvss_block(cfg.block_config(cfg.stage_dim(i)), L);
    }
    k += count::patch_expand(C, L0);
    k += count::patch_expand(C / 2, 4 * L0);
    k += {(C / 4) * cfg.num_classes + cfg.num_classes, (C / 4) * cfg.num_classes * u64(H) * W, 0};
    return k;
}

inline std::uint64_t param_count(const NetworkConfig& cfg) {
    return complexity(cfg, cfg.input_h, cfg.input_w).params;
}

/// Conv/linear MACs of one forward pass on a single H x W image.
inline std::uint64_t flops_count(const NetworkConfig& cfg, std::size_t H, std::size_t W) {
    return complexity(cfg, H, W).flops();
}

}  // namespace cvmh
