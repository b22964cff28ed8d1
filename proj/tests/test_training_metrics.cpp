#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "cvmh/gradcheck.hpp"
#include "cvmh/losses.hpp"
#include "cvmh/metrics.hpp"
#include "cvmh/optim.hpp"

using namespace cvmh;

using Labels = std::vector<std::int32_t>;

TEST(Metrics, TwoClassHandExample) {
    const auto m = compute_metrics(ConfusionMatrix::from_counts(2, {3, 1, 2, 4}));
    EXPECT_DOUBLE_EQ(m.oa, 0.7);
    EXPECT_DOUBLE_EQ(m.oa_literal, 0.35);
    EXPECT_DOUBLE_EQ(m.iou[0], 0.5);
    EXPECT_DOUBLE_EQ(m.iou[1], 4.0 / 7);
    EXPECT_DOUBLE_EQ(m.f1[0], 2.0 / 3);
    EXPECT_DOUBLE_EQ(m.f1[1], 8.0 / 11);
    EXPECT_DOUBLE_EQ(m.miou, (0.5 + 4.0 / 7) / 2);
    EXPECT_DOUBLE_EQ(m.mf1, (2.0 / 3 + 8.0 / 11) / 2);
    EXPECT_DOUBLE_EQ(m.precision[0], 0.6);
    EXPECT_DOUBLE_EQ(m.recall[0], 0.75);
    EXPECT_DOUBLE_EQ(m.precision[1], 0.8);
    EXPECT_DOUBLE_EQ(m.recall[1], 4.0 / 6);
    const double mp = 0.7, mr = (0.75 + 4.0 / 6) / 2;
    EXPECT_NEAR(m.mf1_macro_pr, 2 * mp * mr / (mp + mr), 1e-15);
    EXPECT_EQ(m.support[1], 6u);
}

TEST(Metrics, PerfectPrediction) {
    ConfusionMatrix cm(3);
    Labels t{0, 1, 2, 2, 1, 0};
    cm.add(t, t);
    const auto m = compute_metrics(cm);
    EXPECT_EQ(m.oa, 1.0);
    EXPECT_EQ(m.miou, 1.0);
    EXPECT_EQ(m.mf1, 1.0);
}

TEST(Metrics, IouBoundedByF1AndRelated) {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t K = 2 + rng.below(6);
        std::vector<std::uint64_t> c(K * K);
        for (auto& v : c) v = rng.below(20);
        for (std::size_t k = 0; k < K; ++k) c[k * K + k] += 1;
        const auto m = compute_metrics(ConfusionMatrix::from_counts(K, c));
        for (std::size_t k = 0; k < K; ++k) {
            EXPECT_LE(m.iou[k], m.f1[k] + 1e-15);
            EXPECT_NEAR(m.f1[k], 2 * m.iou[k] / (1 + m.iou[k]), 1e-12);
        }
        EXPECT_LE(m.miou, m.mf1 + 1e-15);
        EXPECT_GE(m.oa, 0.0);
        EXPECT_LE(m.oa, 1.0);
    }
}

TEST(Metrics, InvariantUnderClassRelabeling) {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t K = 3 + rng.below(4);
        std::vector<std::uint64_t> c(K * K);
        for (auto& v : c) v = 1 + rng.below(30);
        std::vector<std::size_t> perm(K);
        std::iota(perm.begin(), perm.end(), 0u);
        for (std::size_t i = K - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
        std::vector<std::uint64_t> pc(K * K);
        for (std::size_t i = 0; i < K; ++i)
            for (std::size_t j = 0; j < K; ++j) pc[perm[i] * K + perm[j]] = c[i * K + j];
        const auto a = compute_metrics(ConfusionMatrix::from_counts(K, c));
        const auto b = compute_metrics(ConfusionMatrix::from_counts(K, pc));
        EXPECT_DOUBLE_EQ(a.oa, b.oa);
        EXPECT_NEAR(a.miou, b.miou, 1e-14);
        EXPECT_NEAR(a.mf1, b.mf1, 1e-14);
        for (std::size_t k = 0; k < K; ++k) EXPECT_DOUBLE_EQ(a.iou[k], b.iou[perm[k]]);
    }
}

TEST(Metrics, UnsupportedAndIgnoredClassesLeftOutOfMeans) {
    // class 2 never appears in the ground truth
    const auto m = compute_metrics(ConfusionMatrix::from_counts(3, {5, 0, 1, 0, 4, 0, 0, 0, 0}));
    EXPECT_FALSE(m.evaluated[2]);
    EXPECT_DOUBLE_EQ(m.miou, (m.iou[0] + m.iou[1]) / 2);
    const auto ig = compute_metrics(ConfusionMatrix::from_counts(3, {5, 0, 1, 0, 4, 0, 0, 0, 0}), 1);
    EXPECT_DOUBLE_EQ(ig.miou, ig.iou[0]);
}

TEST(Metrics, AccumulationAndErrors) {
    ConfusionMatrix a(2), b(2);
    a.add(Labels{0, 1, -1}, Labels{0, 0, 1});
    b.add(1, 1, 3);
    a.merge(b);
    EXPECT_EQ(a.total(), 5u);
    EXPECT_EQ(a.at(1, 0), 1u);
    EXPECT_EQ(a.at(1, 1), 3u);
    EXPECT_THROW(a.add(2, 0), ConfigError);
    EXPECT_THROW(a.merge(ConfusionMatrix(3)), ConfigError);
    EXPECT_THROW(compute_metrics(ConfusionMatrix(2)), ConfigError);
    EXPECT_THROW(ConfusionMatrix::from_counts(2, {1, 2, 3}), ConfigError);
    const auto j = metrics_json(compute_metrics(a), {"bg", "fg"});
    EXPECT_EQ(j.at("per_class")[1].at("name"), "fg");
    EXPECT_EQ(j.at("total_pixels"), 5u);
}

TEST(Loss, UniformLogitsGiveLogK) {
    for (std::size_t K : {2u, 4u, 6u}) {
        auto z = Tensor<double>::zeros({2, K, 3, 3});
        Labels y(18);
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<std::int32_t>(i % K);
        EXPECT_NEAR(cross_entropy(z, y).item(), std::log(double(K)), 1e-12);
    }
}

TEST(Loss, SaturatedCorrectLogitsGiveNearZero) {
    const std::size_t K = 3, P = 4;
    Labels y{0, 2, 1, 2};
    std::vector<double> z(K * P, -30.0);
    for (std::size_t i = 0; i < P; ++i) z[static_cast<std::size_t>(y[i]) * P + i] = 30.0;
    auto logits = Tensor<double>::from({1, K, 2, 2}, z);
    EXPECT_LT(cross_entropy(logits, y).item(), 1e-20);
    EXPECT_LT(dice_loss(logits, y).item(), 1e-12);
}

TEST(Loss, DiceHandExample) {
    // p = 1/2 everywhere, labels {0,0,0,1}: class 0 (3+1)/(5+1), class 1 (1+1)/(3+1)
    auto z = Tensor<double>::zeros({1, 2, 2, 2});
    EXPECT_NEAR(dice_loss(z, Labels{0, 0, 0, 1}).item(), 1 - (4.0 / 6 + 0.5) / 2, 1e-15);
}

TEST(Loss, CrossEntropyHandExample) {
    auto z = Tensor<double>::from({1, 2, 1, 1}, {1.0, 3.0});
    const double lse = std::log(std::exp(1.0) + std::exp(3.0));
    EXPECT_NEAR(cross_entropy(z, Labels{0}).item(), lse - 1, 1e-14);
    EXPECT_NEAR(cross_entropy(z, Labels{1}).item(), lse - 3, 1e-14);
}

TEST(Loss, IgnoredPixelsDoNotContribute) {
    Rng rng(3);
    std::vector<double> zv(2 * 3 * 4);
    for (auto& v : zv) v = rng.uniform(-2, 2);
    auto z = Tensor<double>::from({2, 3, 2, 2}, zv, true);
    Labels y{0, 1, -1, 2, -1, -1, 1, 0};
    LossConfig lc;
    auto parts = segmentation_loss(z, y, lc);
    backward(parts.total);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 4; ++i)
            if (y[n * 4 + i] == -1) {
                for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(z.grad()[(n * 3 + k) * 4 + i], 0.0);
            }
    // manual CE over the five labelled pixels
    double ce = 0;
    int n_lab = 0;
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 4; ++i) {
            const int l = y[n * 4 + i];
            if (l < 0) continue;
            double s = 0;
            for (std::size_t k = 0; k < 3; ++k) s += std::exp(zv[(n * 3 + k) * 4 + i]);
            ce += std::log(s) - zv[(n * 3 + std::size_t(l)) * 4 + i];
            ++n_lab;
        }
    EXPECT_NEAR(parts.ce, ce / n_lab, 1e-12);
    EXPECT_NEAR(parts.total.item(), parts.ce + parts.dice, 1e-12);
}

TEST(Loss, LabelValidation) {
    auto z = Tensor<double>::zeros({1, 2, 1, 2});
    EXPECT_THROW(cross_entropy(z, Labels{0, 2}), ConfigError);
    EXPECT_THROW(cross_entropy(z, Labels{0}), ConfigError);
    LossConfig bad;
    bad.ce_weight = bad.dice_weight = 0;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(AdamW, MatchesHandTrace) {
    ParamSet<double> ps;
    Parameter<double> w("w", Tensor<double>::from({2}, {1.0, -2.0}), false);
    Parameter<double> b("b", Tensor<double>::from({1}, {0.5}), true);
    ps.add(w);
    ps.add(b);
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.01;
    AdamW<double> opt(ps, cfg);
    const double grads[2][3] = {{0.5, -1.0, 2.0}, {-0.25, 0.5, 1.0}};
    double x[3] = {1.0, -2.0, 0.5}, m[3] = {}, v[3] = {};
    for (int t = 1; t <= 2; ++t) {
        for (int j = 0; j < 2; ++j) w.value.grad()[j] = grads[t - 1][j];
        b.value.grad()[0] = grads[t - 1][2];
        opt.step();
        for (int j = 0; j < 3; ++j) {
            if (j < 2) x[j] *= 1 - 0.1 * 0.01;
            const double g = grads[t - 1][j];
            m[j] = 0.9 * m[j] + 0.1 * g;
            v[j] = 0.999 * v[j] + 0.001 * g * g;
            const double mh = m[j] / (1 - std::pow(0.9, t)), vh = v[j] / (1 - std::pow(0.999, t));
            x[j] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
        }
        EXPECT_NEAR(w.value[0], x[0], 1e-14);
        EXPECT_NEAR(w.value[1], x[1], 1e-14);
        EXPECT_NEAR(b.value[0], x[2], 1e-14);
    }
    EXPECT_EQ(opt.steps(), 2u);
}

TEST(AdamW, ZeroLearningRateLeavesParameters) {
    ParamSet<double> ps;
    Parameter<double> w("w", Tensor<double>::from({3}, {1, 2, 3}), false);
    ps.add(w);
    AdamWConfig cfg;
    cfg.lr = 0;
    AdamW<double> opt(ps, cfg);
    for (auto& g : w.value.grad()) g = 7;
    opt.step();
    EXPECT_EQ(w.value.values(), (std::vector<double>{1, 2, 3}));
}

TEST(AdamW, ParameterWithoutGradientIsSkipped) {
    ParamSet<double> ps;
    Parameter<double> w("w", Tensor<double>::from({2}, {1, 2}), false);
    ps.add(w);
    AdamW<double> opt(ps, {});
    opt.step();
    EXPECT_EQ(w.value.values(), (std::vector<double>{1, 2}));
    EXPECT_FALSE(w.value.has_grad());
}

TEST(AdamW, ConfigValidation) {
    ParamSet<double> ps;
    AdamWConfig c;
    c.lr = -1;
    EXPECT_THROW(AdamW<double>(ps, c), ConfigError);
    c.lr = 1e-3;
    c.beta1 = 1.0;
    EXPECT_THROW(AdamW<double>(ps, c), ConfigError);
}

TEST(Training, TinyProblemLossDecreases) {
    // a single linear classifier on separable pixels
    ParamSet<double> ps;
    Parameter<double> W("W", Tensor<double>::from({2, 2}, {0.1, -0.1, 0.05, 0.2}), false);
    ps.add(W);
    auto x = Tensor<double>::from({1, 2, 1, 4}, {1, 1, -1, -1, -1, -1, 1, 1});
    Labels y{0, 0, 1, 1};
    AdamWConfig cfg;
    cfg.lr = 0.05;
    AdamW<double> opt(ps, cfg);
    double first = 0, last = 0;
    for (int s = 0; s < 50; ++s) {
        ps.zero_grad();
        auto parts = segmentation_loss(ops::pointwise(x, W.value), y, LossConfig{});
        if (s == 0) first = parts.total.item();
        last = parts.total.item();
        backward(parts.total);
        opt.step();
    }
    EXPECT_LT(last, 0.5 * first);
}

TEST(GradCheck, SegmentationLoss) {
    const auto rep = run_gradcheck_suite(5, 1, "segmentation_loss");
    ASSERT_FALSE(rep.results.empty());
    for (const auto& r : rep.results) EXPECT_TRUE(r.passed) << r.op << " seed " << r.seed << " rel " << r.rel_error;
}
