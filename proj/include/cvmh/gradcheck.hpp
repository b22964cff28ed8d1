#pragma once

// Central finite-difference gradient checks in double precision over every
// differentiable building block, plus a corrupted op as a negative control.
//
// Each case reduces the block output to a scalar with a fixed random
// projection r (loss = sum(out * r)) and compares the tape gradient of every
// input and parameter with (loss(x + h) - loss(x - h)) / 2h on sampled entries.
// Error = max|a - n| / max(|a|_inf, |n|_inf, 1e-8).

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "losses.hpp"
#include "network.hpp"

namespace cvmh {

struct GradCheckOptions {
    double h = 1e-5;
    double tol = 1e-4;
    std::size_t per_leaf = 12;  // entries sampled per tensor
    std::size_t total = 400;    // overall entry budget per case
};

struct GradCheckResult {
    std::string op;
    std::uint64_t seed = 0;
    double rel_error = 0;
    double max_abs_error = 0;
    double grad_scale = 0;
    std::size_t entries = 0;
    bool passed = false;
};

using DTensor = Tensor<double>;

template <typename F>
GradCheckResult check_gradients(const std::string& op, std::uint64_t seed, std::vector<DTensor> leaves, F fn,
                                const GradCheckOptions& opt = {}) {
    Rng rng(seed ^ 0x9E3779B97F4A7C15ULL);
    DTensor out = fn();
    std::vector<double> r(out.numel());
    for (auto& v : r) v = rng.uniform(-1, 1);
    const DTensor R = DTensor::from(out.shape(), r);
    auto scalar = [&] {
        NoGradGuard ng;
        const DTensor o = fn();
        double s = 0;
        for (std::size_t i = 0; i < r.size(); ++i) s += o[i] * r[i];
        return s;
    };

    for (auto& l : leaves) {
        l.set_requires_grad(true);
        l.zero_grad();
    }
    backward(ops::sum(ops::mul(fn(), R)));

    // sample (leaf, entry) pairs
    std::vector<std::pair<std::size_t, std::size_t>> picks;
    std::size_t all = 0;
    for (const auto& l : leaves) all += std::min(l.numel(), opt.per_leaf);
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        const std::size_t n = leaves[li].numel();
        std::size_t take = std::min(n, opt.per_leaf);
        if (all > opt.total) take = 0;
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        for (std::size_t i = 0; i < take; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
        for (std::size_t i = 0; i < take; ++i) picks.emplace_back(li, idx[i]);
    }
    if (all > opt.total)
        for (std::size_t k = 0; k < opt.total; ++k) {
            const std::size_t li = rng.below(leaves.size());
            picks.emplace_back(li, rng.below(leaves[li].numel()));
        }

    double max_a = 0, max_n = 0, max_d = 0;
    for (const auto& [li, i] : picks) {
        auto& l = leaves[li];
        const double a = l.has_grad() ? l.grad()[i] : 0.0;
        double& x = l.values()[i];
        const double x0 = x;
        x = x0 + opt.h;
        const double fp = scalar();
        x = x0 - opt.h;
        const double fm = scalar();
        x = x0;
        const double n = (fp - fm) / (2 * opt.h);
        max_a = std::max(max_a, std::fabs(a));
        max_n = std::max(max_n, std::fabs(n));
        max_d = std::max(max_d, std::fabs(a - n));
    }
    GradCheckResult res;
    res.op = op;
    res.seed = seed;
    res.max_abs_error = max_d;
    res.grad_scale = std::max(max_a, max_n);
    res.rel_error = max_d / std::max({max_a, max_n, 1e-8});
    res.entries = picks.size();
    res.passed = res.rel_error < opt.tol && std::isfinite(res.rel_error);
    return res;
}

namespace gradcheck {

inline DTensor random(Shape s, Rng& rng, double lo = -1, double hi = 1) {
    std::vector<double> v(numel(s));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return DTensor::from(std::move(s), std::move(v), true);
}

/// Adds noise to every parameter so zero-initialized projections do not hide
/// the gradients of everything behind them.
inline std::vector<DTensor> leaves_of(ParamSet<double>& ps, Rng& rng, double noise = 0.25) {
    std::vector<DTensor> out;
    for (auto* p : ps.params) {
        for (auto& v : p->value.values()) v += rng.uniform(-noise, noise);
        out.push_back(p->value);
    }
    return out;
}

template <typename M>
std::vector<DTensor> module_leaves(M& m, Rng& rng, std::vector<DTensor> inputs) {
    ParamSet<double> ps;
    m.collect(ps);
    auto ls = leaves_of(ps, rng);
    inputs.insert(inputs.end(), ls.begin(), ls.end());
    return inputs;
}

inline CVSSConfig small_block(std::size_t dim = 4, ScanMode mode = ScanMode::CS2D) {
    CVSSConfig c;
    c.dim = dim;
    c.d_state = 3;
    c.scan_mode = mode;
    c.ca_reduction = 2;
    c.effn_ratio = 0.5;
    return c;
}

inline MFMSConfig small_mfms(std::size_t dim = 8) {
    MFMSConfig m;
    m.dim = dim;
    m.frequencies.selection = default_frequencies(6);
    m.local_reduction = 4;
    return m;
}

/// x^2 whose backward is deliberately wrong by 10%.
template <typename T>
Tensor<T> corrupted_square(const Tensor<T>& x) {
    std::vector<T> y(x.numel());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * x[i];
    auto nx = x.node_ptr();
    return make_result<T>(x.shape(), std::move(y), {x}, "corrupted_square", [nx](Node<T>& o) {
        T* g = grad_sink(nx);
        if (!g) return;
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * T(2.2) * nx->data[i];
    });
}

struct Case {
    std::string name;
    std::function<GradCheckResult(std::uint64_t)> run;
    bool expect_fail = false;
};

inline std::vector<Case> cases(const GradCheckOptions& opt = {}) {
    std::vector<Case> cs;
    auto add = [&](std::string name, std::function<GradCheckResult(std::uint64_t)> f, bool expect_fail = false) {
        cs.push_back({std::move(name), std::move(f), expect_fail});
    };

    add("linear", [opt](std::uint64_t s) {
        Rng rng(s);
        Linear<double> m("m", 5, 3, true, rng);
        auto x = random({2, 4, 5}, rng);
        return check_gradients("linear", s, module_leaves(m, rng, {x}), [&] { return m.last(x); }, opt);
    });
    add("pointwise", [opt](std::uint64_t s) {
        Rng rng(s);
        Linear<double> m("m", 4, 3, true, rng);
        auto x = random({2, 4, 3, 5}, rng);
        return check_gradients("pointwise", s, module_leaves(m, rng, {x}), [&] { return m.channels(x); }, opt);
    });
    add("conv2d", [opt](std::uint64_t s) {
        Rng rng(s);
        Conv2d<double> m("m", 3, 4, 3, 1, 1, true, rng);
        auto x = random({2, 3, 6, 5}, rng);
        return check_gradients("conv2d", s, module_leaves(m, rng, {x}), [&] { return m(x); }, opt);
    });
    add("conv2d_stride4", [opt](std::uint64_t s) {
        Rng rng(s);
        Conv2d<double> m("m", 3, 4, 4, 4, 0, true, rng);
        auto x = random({2, 3, 8, 8}, rng);
        return check_gradients("conv2d_stride4", s, module_leaves(m, rng, {x}), [&] { return m(x); }, opt);
    });
    add("depthwise_conv2d", [opt](std::uint64_t s) {
        Rng rng(s);
        DepthwiseConv2d<double> m("m", 4, 3, rng);
        auto x = random({2, 4, 5, 6}, rng);
        return check_gradients("depthwise_conv2d", s, module_leaves(m, rng, {x}), [&] { return m(x); }, opt);
    });
    add("conv1d", [opt](std::uint64_t s) {
        Rng rng(s);
        Conv1d<double> m("m", 3, rng);
        auto x = random({2, 7}, rng);
        return check_gradients("conv1d", s, module_leaves(m, rng, {x}), [&] { return m(x); }, opt);
    });
    add("layer_norm", [opt](std::uint64_t s) {
        Rng rng(s);
        LayerNorm<double> m("m", 4);
        auto x = random({2, 4, 3, 3}, rng);
        return check_gradients("layer_norm", s, module_leaves(m, rng, {x}), [&] { return m.channels(x); }, opt);
    });
    add("batch_norm", [opt](std::uint64_t s) {
        Rng rng(s);
        BatchNorm<double> m("m", 3);
        auto x = random({2, 3, 2, 3}, rng);
        return check_gradients("batch_norm", s, module_leaves(m, rng, {x}), [&] { return m(x, true); }, opt);
    });
    add("activations", [opt](std::uint64_t s) {
        Rng rng(s);
        auto x = random({3, 8}, rng, -3, 3);
        return check_gradients("activations", s, {x}, [&] {
            return ops::add(ops::add(ops::gelu(x), ops::silu(x)), ops::add(ops::sigmoid(x), ops::softplus(x)));
        }, opt);
    });
    add("global_pools", [opt](std::uint64_t s) {
        Rng rng(s);
        auto x = random({2, 3, 4, 4}, rng);
        return check_gradients("global_pools", s, {x}, [&] {
            auto p = ops::global_pools(x);
            return ops::concat<double>({p.avg, p.max, p.min}, 1);
        }, opt);
    });
    for (auto kernel : {ScanKernel::Sequential, ScanKernel::Blocked}) {
        const std::string name = kernel == ScanKernel::Sequential ? "selective_scan" : "selective_scan_blocked";
        add(name, [opt, kernel, name](std::uint64_t s) {
            Rng rng(s);
            const std::size_t N = 2, Di = 3, Ns = 4, L = 7;
            auto u = random({N, Di, L}, rng);
            auto dp = random({N, Di, L}, rng);
            auto db = random({Di}, rng, -2, 0);
            auto al = random({Di, Ns}, rng, -0.5, 1);
            auto B = random({N, Ns, L}, rng);
            auto C = random({N, Ns, L}, rng);
            auto D = random({Di}, rng);
            return check_gradients(name, s, {u, dp, db, al, B, C, D}, [&] {
                return selective_scan(u, dp, db, al, B, C, D, kernel, 3);
            }, opt);
        });
    }
    add("s6", [opt](std::uint64_t s) {
        Rng rng(s);
        S6<double> m("m", 4, 3, 2, rng);
        auto x = random({2, 4, 6}, rng);
        return check_gradients("s6", s, module_leaves(m, rng, {x}), [&] { return m(x); }, opt);
    });
    for (auto mode : {ScanMode::SS2D, ScanMode::CS2D}) {
        const std::string name = std::string("directional_ssm_") + to_string(mode);
        add(name, [opt, mode, name](std::uint64_t s) {
            Rng rng(s);
            DirectionalSsm<double> m("m", 4, 3, 1, mode, rng);
            auto x = random({2, 4, 3, 4}, rng);
            return check_gradients(name, s, module_leaves(m, rng, {x}), [&] { return m(x); }, opt);
        });
    }
    add("cross_scan", [opt](std::uint64_t s) {
        Rng rng(s);
        CrossScan<double> m("m", small_block(), rng);
        auto x = random({2, 4, 3, 3}, rng);
        return check_gradients("cross_scan", s, module_leaves(m, rng, {x}), [&] { return m(x); }, opt);
    });
    add("channel_attention", [opt](std::uint64_t s) {
        Rng rng(s);
        ChannelAttention<double> m("m", 4, 2, rng);
        auto x = random({2, 4, 3, 3}, rng);
        return check_gradients("channel_attention", s, module_leaves(m, rng, {x}), [&] { return m(x); }, opt);
    });
    add("spatial_attention", [opt](std::uint64_t s) {
        Rng rng(s);
        SpatialAttention<double> m("m", rng);
        auto x = random({2, 3, 4, 4}, rng);
        return check_gradients("spatial_attention", s, module_leaves(m, rng, {x}), [&] { return m(x); }, opt);
    });
    add("effn", [opt](std::uint64_t s) {
        Rng rng(s);
        EFFN<double> m("m", 4, 2, true, rng);
        auto x = random({2, 4, 3, 3}, rng);
        return check_gradients("effn", s, module_leaves(m, rng, {x}), [&] { return m(x); }, opt);
    });
    add("cvss_block", [opt](std::uint64_t s) {
        Rng rng(s);
        CVSSBlock<double> m("m", small_block(), rng);
        auto x = random({2, 4, 3, 3}, rng);
        return check_gradients("cvss_block", s, module_leaves(m, rng, {x}), [&] { return m(x); }, opt);
    });
    add("cvss_stage_paired", [opt](std::uint64_t s) {
        Rng rng(s);
        CVSSStage<double> m("m", small_block(4, ScanMode::SS2D), 2, true, rng);
        auto x = random({1, 4, 2, 3}, rng);
        return check_gradients("cvss_stage_paired", s, module_leaves(m, rng, {x}), [&] { return m(x); }, opt);
    });
    add("compress_frequencies", [opt](std::uint64_t s) {
        Rng rng(s);
        auto x = random({2, 3, 4, 4}, rng);
        FrequencyConfig f;
        f.selection = default_frequencies(5);
        return check_gradients("compress_frequencies", s, {x}, [&] { return compress_frequencies(x, f); }, opt);
    });
    add("mfms_global", [opt](std::uint64_t s) {
        Rng rng(s);
        auto cfg = small_mfms();
        GlobalAttention<double> m("m", 8, cfg.frequencies, cfg.kernel, true, true, rng);
        auto x = random({2, 8, 4, 4}, rng);
        return check_gradients("mfms_global", s, module_leaves(m, rng, {x}), [&] { return m(x); }, opt);
    });
    add("mfms_local", [opt](std::uint64_t s) {
        Rng rng(s);
        LocalAttention<double> m("m", 8, 4, rng);
        auto x = random({2, 8, 3, 3}, rng);
        return check_gradients("mfms_local", s, module_leaves(m, rng, {x}), [&] { return m(x, true); }, opt);
    });
    add("mfms_block", [opt](std::uint64_t s) {
        Rng rng(s);
        MFMSBlock<double> m("m", small_mfms(), rng);
        auto F = random({2, 8, 3, 3}, rng);
        auto Ft = random({2, 8, 3, 3}, rng);
        return check_gradients("mfms_block", s, module_leaves(m, rng, {F, Ft}), [&] { return m(F, Ft, true); }, opt);
    });
    add("patch_merge", [opt](std::uint64_t s) {
        Rng rng(s);
        PatchMerge<double> m("m", 3, rng);
        auto x = random({2, 3, 4, 4}, rng);
        return check_gradients("patch_merge", s, module_leaves(m, rng, {x}), [&] { return m(x); }, opt);
    });
    add("patch_expand", [opt](std::uint64_t s) {
        Rng rng(s);
        PatchExpand<double> m("m", 4, rng);
        auto x = random({2, 4, 2, 3}, rng);
        return check_gradients("patch_expand", s, module_leaves(m, rng, {x}), [&] { return m(x); }, opt);
    });
    add("segmentation_loss", [opt](std::uint64_t s) {
        Rng rng(s);
        auto z = random({2, 3, 3, 3}, rng, -2, 2);
        std::vector<std::int32_t> lab(2 * 9);
        for (auto& l : lab) l = static_cast<std::int32_t>(rng.below(3));
        lab[4] = -1;
        return check_gradients("segmentation_loss", s, {z}, [&] {
            return segmentation_loss<double>(z, lab, LossConfig{}).total;
        }, opt);
    });
    add("network_tiny", [opt](std::uint64_t s) {
        NetworkConfig cfg;
        cfg.embed_dim = 8;
        cfg.num_classes = 3;
        cfg.d_state = 2;
        cfg.input_h = cfg.input_w = 32;
        cfg.frequencies.selection = default_frequencies(4);
        cfg.mfms_reduction = 4;
        auto net = std::make_unique<CvmhUNet<double>>(cfg, s);
        Rng rng(s + 1);
        auto x = random({2, 3, 32, 32}, rng);
        auto leaves = leaves_of(net->params(), rng, 0.1);
        leaves.insert(leaves.begin(), x);
        GradCheckOptions o = opt;
        o.total = std::min<std::size_t>(o.total, 120);
        return check_gradients("network_tiny", s, leaves, [&] { return net->forward(x, true); }, o);
    });
    add("negative_control", [opt](std::uint64_t s) {
        Rng rng(s);
        auto x = random({2, 5}, rng);
        return check_gradients("negative_control", s, {x}, [&] { return corrupted_square(x); }, opt);
    }, true);
    return cs;
}

}  // namespace gradcheck

struct GradCheckReport {
    std::vector<GradCheckResult> results;
    std::vector<std::string> failures;  // real failures, plus a negative control that was not detected
    bool ok() const { return failures.empty(); }
};

/// Runs every case for seeds base..base+n_seeds-1. A case whose name does not
/// contain `filter` is skipped.
inline GradCheckReport run_gradcheck_suite(std::size_t n_seeds = 5, std::uint64_t base_seed = 1,
                                           const std::string& filter = "", const GradCheckOptions& opt = {}) {
    GradCheckReport rep;
    for (const auto& c : gradcheck::cases(opt)) {
        if (!filter.empty() && c.name.find(filter) == std::string::npos) continue;
        bool detected = false;
        for (std::size_t k = 0; k < n_seeds; ++k) {
            auto r = c.run(base_seed + k);
            if (c.expect_fail) {
                detected = detected || !r.passed;
            } else if (!r.passed) {
                rep.failures.push_back(r.op + " seed " + std::to_string(r.seed) + " rel_error " +
                                       std::to_string(r.rel_error));
            }
            rep.results.push_back(std::move(r));
        }
        if (c.expect_fail && n_seeds > 0 && !detected)
            rep.failures.push_back(c.name + ": corrupted backward not detected");
    }
    return rep;
}

}  // namespace cvmh
