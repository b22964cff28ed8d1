#include <gtest/gtest.h>

#include <cmath>

#include "cvmh/gradcheck.hpp"

using namespace cvmh;

namespace {

Tensor<double> rnd(Shape s, Rng& rng) {
    std::vector<double> v(numel(s));
    for (auto& x : v) x = rng.uniform(-1, 1);
    return Tensor<double>::from(std::move(s), std::move(v));
}

void expect_all_passed(const std::string& filter) {
    const auto rep = run_gradcheck_suite(5, 1, filter);
    ASSERT_FALSE(rep.results.empty()) << filter;
    for (const auto& r : rep.results) EXPECT_TRUE(r.passed) << r.op << " seed " << r.seed << " rel " << r.rel_error;
}

}  // namespace

TEST(Conv1d, KernelOneIsIdentity) {
    auto x = Tensor<double>::from({1, 1, 5}, {1, -2, 3, 4, 5});
    auto w = Tensor<double>::from({1, 1, 1}, {1.0});
    EXPECT_EQ(ops::conv1d(x, w).values(), x.values());
}

TEST(Conv1d, CenterTapIsIdentity) {
    auto x = Tensor<double>::from({1, 1, 4}, {1, 2, 3, 4});
    auto w = Tensor<double>::from({1, 1, 3}, {0, 1, 0});
    EXPECT_EQ(ops::conv1d(x, w).values(), x.values());
}

TEST(Conv1d, MatchesSlidingWindowOracle) {
    Rng rng(3);
    auto x = rnd({2, 1, 8}, rng);
    auto w = rnd({1, 1, 5}, rng);
    auto b = rnd({1}, rng);
    auto y = ops::conv1d(x, w, b);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 8; ++i) {
            double ref = b[0];
            for (std::size_t k = 0; k < 5; ++k) {
                const long j = long(i) + long(k) - 2;
                if (j >= 0 && j < 8) ref += w[k] * x[n * 8 + std::size_t(j)];
            }
            EXPECT_NEAR(y[n * 8 + i], ref, 1e-12);
        }
}

TEST(Conv1d, EvenKernelRejected) {
    auto x = Tensor<double>::zeros({1, 1, 4});
    EXPECT_THROW(ops::conv1d(x, Tensor<double>::zeros({1, 1, 2})), ConfigError);
    Rng rng(0);
    EXPECT_THROW(Conv1d<double>("c", 4, rng), ConfigError);
}

TEST(Linear, IdentityAndHandExample) {
    auto x = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
    auto I = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    EXPECT_EQ(ops::linear(x, I).values(), x.values());
    auto y = ops::linear(Tensor<double>::from({2}, {2, 3}), Tensor<double>::from({1, 2}, {1, 1}));
    EXPECT_DOUBLE_EQ(y[0], 5.0);
}

TEST(Conv2d, MatchesNaiveLoopOracle) {
    Rng rng(7);
    for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 0}, {2, 1}}) {
        auto x = rnd({2, 3, 7, 6}, rng);
        auto w = rnd({4, 3, 3, 3}, rng);
        auto b = rnd({4}, rng);
        auto y = ops::conv2d(x, w, b, stride, pad);
        const std::size_t Ho = (7 + 2 * pad - 3) / stride + 1, Wo = (6 + 2 * pad - 3) / stride + 1;
        ASSERT_EQ(y.shape(), (Shape{2, 4, Ho, Wo}));
        double max_diff = 0;
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t o = 0; o < 4; ++o)
                for (std::size_t i = 0; i < Ho; ++i)
                    for (std::size_t j = 0; j < Wo; ++j) {
                        double ref = b[o];
                        for (std::size_t c = 0; c < 3; ++c)
                            for (std::size_t ki = 0; ki < 3; ++ki)
                                for (std::size_t kj = 0; kj < 3; ++kj) {
                                    const long h = long(i * stride + ki) - long(pad), ww = long(j * stride + kj) - long(pad);
                                    if (h < 0 || h >= 7 || ww < 0 || ww >= 6) continue;
                                    ref += w[((o * 3 + c) * 3 + ki) * 3 + kj] * x[((n * 3 + c) * 7 + std::size_t(h)) * 6 + std::size_t(ww)];
                                }
                        max_diff = std::max(max_diff, std::fabs(y[((n * 4 + o) * Ho + i) * Wo + j] - ref));
                    }
        EXPECT_LT(max_diff, 1e-6);
    }
}

TEST(DepthwiseConv2d, MatchesNaiveLoopOracle) {
    Rng rng(8);
    auto x = rnd({2, 3, 5, 4}, rng);
    auto w = rnd({3, 1, 3, 3}, rng);
    auto b = rnd({3}, rng);
    auto y = ops::depthwise_conv2d(x, w, b, 1, 1);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < 5; ++i)
                for (std::size_t j = 0; j < 4; ++j) {
                    double ref = b[c];
                    for (std::size_t ki = 0; ki < 3; ++ki)
                        for (std::size_t kj = 0; kj < 3; ++kj) {
                            const long h = long(i + ki) - 1, ww = long(j + kj) - 1;
                            if (h < 0 || h >= 5 || ww < 0 || ww >= 4) continue;
                            ref += w[(c * 3 + ki) * 3 + kj] * x[((n * 3 + c) * 5 + std::size_t(h)) * 4 + std::size_t(ww)];
                        }
                    EXPECT_NEAR(y[((n * 3 + c) * 5 + i) * 4 + j], ref, 1e-12);
                }
}

TEST(LayerNorm, ConstantInputNormalizesToZero) {
    auto x = Tensor<double>::full({2, 4}, 3.0);
    auto y = ops::layer_norm(x, Tensor<double>::ones({4}), Tensor<double>::zeros({4}), 1);
    for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(LayerNorm, HandComputedPair) {
    // mean 2, var 1 -> (x - 2) / sqrt(1 + 1e-5)
    auto y = ops::layer_norm(Tensor<double>::from({1, 2}, {1, 3}), Tensor<double>::ones({2}), Tensor<double>::zeros({2}), 1);
    const double s = std::sqrt(1.0 + 1e-5);
    EXPECT_NEAR(y[0], -1.0 / s, 1e-12);
    EXPECT_NEAR(y[1], 1.0 / s, 1e-12);
}

TEST(LayerNorm, ZeroMeanUnitVariancePerToken) {
    Rng rng(2);
    auto x = rnd({3, 5, 2, 2}, rng);
    auto y = ops::layer_norm(x, Tensor<double>::ones({5}), Tensor<double>::zeros({5}), 1);
    for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t p = 0; p < 4; ++p) {
            double m = 0, v = 0, mx = 0, vx = 0;
            for (std::size_t c = 0; c < 5; ++c) {
                m += y[(n * 5 + c) * 4 + p];
                mx += x[(n * 5 + c) * 4 + p];
            }
            m /= 5;
            mx /= 5;
            for (std::size_t c = 0; c < 5; ++c) {
                v += (y[(n * 5 + c) * 4 + p] - m) * (y[(n * 5 + c) * 4 + p] - m);
                vx += (x[(n * 5 + c) * 4 + p] - mx) * (x[(n * 5 + c) * 4 + p] - mx);
            }
            v /= 5;
            vx /= 5;
            EXPECT_NEAR(m, 0, 1e-12);
            // eps = 1e-5 shrinks the variance to vx / (vx + eps)
            EXPECT_NEAR(v, vx / (vx + 1e-5), 1e-12);
        }
}

TEST(BatchNorm, EvalWithInitialStatsIsIdentity) {
    ops::BatchNormStats<double> st(2);
    auto x = Tensor<double>::from({1, 2, 1, 2}, {1, -2, 3, 0.5});
    auto y = ops::batch_norm(x, Tensor<double>::ones({2}), Tensor<double>::zeros({2}), st, false);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], x[i] / std::sqrt(1 + 1e-5), 1e-12);
}

TEST(BatchNorm, TrainingNormalizesAndUpdatesRunningStats) {
    ops::BatchNormStats<double> st(1);
    auto x = Tensor<double>::from({2, 1}, {0, 2});
    auto y = ops::batch_norm(x, Tensor<double>::ones({1}), Tensor<double>::zeros({1}), st, true);
    const double s = std::sqrt(1.0 + 1e-5);
    EXPECT_NEAR(y[0], -1 / s, 1e-12);
    EXPECT_NEAR(y[1], 1 / s, 1e-12);
    EXPECT_NEAR(st.mean[0], 0.1 * 1.0, 1e-15);
    // unbiased batch variance 2 -> 0.9 * 1 + 0.1 * 2
    EXPECT_NEAR(st.var[0], 1.1, 1e-12);
}

TEST(Activations, ReferenceValues) {
    auto x = Tensor<double>::from({7}, {-3, -1, 0, 1, 3, -1, 2});
    auto s = ops::sigmoid(x), r = ops::relu(x), si = ops::silu(x), g = ops::gelu(x);
    EXPECT_DOUBLE_EQ(s[2], 0.5);
    EXPECT_EQ(r[5], 0.0);
    EXPECT_EQ(r[6], 2.0);
    for (std::size_t i = 0; i < 5; ++i) {
        const long double v = x[i];
        const long double sig = 1.0L / (1.0L + std::exp(-v));
        EXPECT_NEAR(si[i], static_cast<double>(v * sig), 1e-6);
        EXPECT_NEAR(g[i], static_cast<double>(0.5L * v * (1.0L + std::erf(v / std::sqrt(2.0L)))), 1e-6);
    }
}

TEST(GlobalPools, ConstantAndHandExample) {
    auto c = ops::global_pools(Tensor<double>::full({1, 1, 3, 3}, 2.5));
    EXPECT_DOUBLE_EQ(c.avg[0], 2.5);
    EXPECT_DOUBLE_EQ(c.max[0], 2.5);
    EXPECT_DOUBLE_EQ(c.min[0], 2.5);
    auto p = ops::global_pools(Tensor<double>::from({1, 1, 2, 2}, {1, 2, 3, 4}));
    EXPECT_DOUBLE_EQ(p.avg[0], 2.5);
    EXPECT_DOUBLE_EQ(p.max[0], 4);
    EXPECT_DOUBLE_EQ(p.min[0], 1);
}

TEST(GlobalPools, MaxGradientRoutesToFirstArgmax) {
    auto x = Tensor<double>::from({1, 1, 2, 2}, {4, 1, 4, 2}, true);
    backward(ops::sum(ops::global_pools(x).max));
    EXPECT_EQ(x.grad()[0], 1.0);
    EXPECT_EQ(x.grad()[1], 0.0);
    EXPECT_EQ(x.grad()[2], 0.0);
    EXPECT_EQ(x.grad()[3], 0.0);
}

TEST(GlobalPools, MinGradientMatchesFiniteDifference) {
    auto x = Tensor<double>::from({1, 1, 2, 2}, {3, 1.5, -0.7, 2}, true);
    backward(ops::sum(ops::global_pools(x).min));
    EXPECT_EQ(x.grad()[2], 1.0);
    double before = -0.7, h = 1e-6;
    x.values()[2] = before + h;
    const double up = ops::global_pools(x).min[0];
    x.values()[2] = before - h;
    const double dn = ops::global_pools(x).min[0];
    EXPECT_NEAR((up - dn) / (2 * h), 1.0, 1e-8);
}

TEST(SpaceToDepth, RoundTrip) {
    Rng rng(1);
    auto x = rnd({2, 3, 4, 6}, rng);
    auto y = ops::space_to_depth2(x);
    EXPECT_EQ(y.shape(), (Shape{2, 12, 2, 3}));
    EXPECT_EQ(ops::depth_to_space2(y).values(), x.values());
}

TEST(GradCheck, ConvPrimitives) {
    for (const char* f : {"linear", "pointwise", "conv2d", "depthwise_conv2d", "conv1d"}) expect_all_passed(f);
}

TEST(GradCheck, Normalization) {
    expect_all_passed("layer_norm");
    expect_all_passed("batch_norm");
}

TEST(GradCheck, ActivationsAndPools) {
    expect_all_passed("activations");
    expect_all_passed("global_pools");
}
