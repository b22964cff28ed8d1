#include <gtest/gtest.h>

#include "cvmh/complexity.hpp"
#include "cvmh/gradcheck.hpp"

using namespace cvmh;

namespace {

Tensor<double> rnd(Shape s, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(numel(s));
    for (auto& x : v) x = rng.uniform(-1, 1);
    return Tensor<double>::from(std::move(s), std::move(v));
}

}  // namespace

TEST(CVSSBlock, IdentityAtInitialization) {
    for (ScanMode m : {ScanMode::SS2D, ScanMode::CS2D})
        for (bool local : {true, false}) {
            auto c = gradcheck::small_block(8, m);
            c.local_branch = local;
            Rng rng(3);
            CVSSBlock<double> b("b", c, rng);
            auto x = rnd({2, 8, 5, 4}, 1);
            EXPECT_EQ(b(x).values(), x.values());
            EXPECT_EQ(b.cross_scan()(x).values(), x.values());
        }
}

TEST(CVSSBlock, OutputShapeMatchesInput) {
    auto c = gradcheck::small_block(8);
    c.zero_init = false;
    Rng rng(2);
    CVSSBlock<double> b("b", c, rng);
    auto x = rnd({1, 8, 3, 7}, 4);
    auto y = b(x);
    EXPECT_EQ(y.shape(), x.shape());
    EXPECT_NE(y.values(), x.values());
    EXPECT_TRUE(y.all_finite());
}

TEST(ChannelAttention, ZeroWeightsHalveInput) {
    Rng rng(1);
    ChannelAttention<double> ca("ca", 8, 2, rng);
    ca.zero_();
    auto x = rnd({2, 8, 3, 3}, 2);
    auto y = ca(x);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], 0.5 * x[i]);
}

TEST(ChannelAttention, WeightsMatchHandMlp) {
    Rng rng(6);
    ChannelAttention<double> ca("ca", 4, 2, rng);
    auto x = rnd({1, 4, 2, 3}, 9);
    auto w = ca.weights(x);
    const auto& W1 = ca.fc1().weight().value;
    const auto& b1 = ca.fc1().bias().value;
    const auto& W2 = ca.fc2().weight().value;
    const auto& b2 = ca.fc2().bias().value;
    std::vector<double> avg(4, 0), mx(4, -1e9);
    for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t s = 0; s < 6; ++s) {
            avg[c] += x[c * 6 + s] / 6;
            mx[c] = std::max(mx[c], x[c * 6 + s]);
        }
    auto mlp = [&](const std::vector<double>& v) {
        std::vector<double> h(2), o(4);
        for (std::size_t j = 0; j < 2; ++j) {
            h[j] = b1[j];
            for (std::size_t c = 0; c < 4; ++c) h[j] += W1[j * 4 + c] * v[c];
            h[j] = std::max(0.0, h[j]);
        }
        for (std::size_t c = 0; c < 4; ++c) {
            o[c] = b2[c];
            for (std::size_t j = 0; j < 2; ++j) o[c] += W2[c * 2 + j] * h[j];
        }
        return o;
    };
    const auto a = mlp(avg), m = mlp(mx);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(w[c], 1 / (1 + std::exp(-(a[c] + m[c]))), 1e-12);
}

TEST(SpatialAttention, ZeroConvGivesHalfMask) {
    Rng rng(1);
    SpatialAttention<double> sa("sa", rng);
    sa.zero_();
    auto x = rnd({1, 5, 4, 4}, 3);
    auto m = sa.mask(x);
    EXPECT_EQ(m.shape(), (Shape{1, 1, 4, 4}));
    for (double v : m.values()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(EFFN, ZeroInitOutputsZero) {
    Rng rng(1);
    EFFN<double> e("e", 8, 2, true, rng);
    auto y = e(rnd({1, 8, 3, 3}, 5));
    for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(CVSSStage, PairedResidualDoublesAtInit) {
    auto c = gradcheck::small_block(4);
    auto x = rnd({1, 4, 3, 3}, 7);
    for (std::size_t depth : {2u, 3u, 4u}) {
        Rng rng(1);
        CVSSStage<double> paired("s", c, depth, true, rng);
        Rng rng2(1);
        CVSSStage<double> plain("s", c, depth, false, rng2);
        // each pair maps x -> x + x
        const double factor = double(1u << (depth / 2));
        auto yp = paired(x), yu = plain(x);
        for (std::size_t i = 0; i < x.numel(); ++i) {
            EXPECT_DOUBLE_EQ(yp[i], factor * x[i]) << "depth " << depth;
            EXPECT_DOUBLE_EQ(yu[i], x[i]);
        }
    }
}

TEST(CVSSStage, PairedMatchesManualComposition) {
    auto c = gradcheck::small_block(4);
    c.zero_init = false;
    Rng rng(8);
    CVSSStage<double> st("s", c, 3, true, rng);
    auto x = rnd({1, 4, 4, 3}, 2);
    auto ref = st.block(2)(ops::add(x, st.block(1)(st.block(0)(x))));
    EXPECT_EQ(st(x).values(), ref.values());
}

TEST(CVSSBlock, ParameterCountIndependentOfScanModeAndMatchesAnalytic) {
    for (bool local : {true, false}) {
        std::size_t counts[2];
        for (ScanMode m : {ScanMode::SS2D, ScanMode::CS2D}) {
            auto c = gradcheck::small_block(16, m);
            c.local_branch = local;
            Rng rng(1);
            CVSSBlock<float> b("b", c, rng);
            ParamSet<float> ps;
            b.collect(ps);
            ps.check_unique();
            counts[m == ScanMode::CS2D] = ps.count();
            EXPECT_EQ(ps.count(), count::cvss_block(c, 64).params);
        }
        EXPECT_EQ(counts[0], counts[1]);
    }
}

TEST(CVSSBlock, ScanModeChangesOutputOnceTrained) {
    auto c = gradcheck::small_block(8, ScanMode::SS2D);
    c.zero_init = false;
    Rng r1(4);
    CVSSBlock<double> a("b", c, r1);
    c.scan_mode = ScanMode::CS2D;
    Rng r2(4);
    CVSSBlock<double> b("b", c, r2);
    auto x = rnd({1, 8, 4, 4}, 1);
    EXPECT_NE(a(x).values(), b(x).values());
}

TEST(CVSSBlock, ConfigValidation) {
    CVSSConfig c;
    c.dim = 10;
    c.ca_reduction = 4;
    EXPECT_THROW(c.validate(), ConfigError);
    c.dim = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(GradCheck, CVSSComponents) {
    for (const char* f : {"cross_scan", "channel_attention", "spatial_attention", "effn", "cvss_block",
                          "cvss_stage_paired"}) {
        const auto rep = run_gradcheck_suite(5, 1, f);
        ASSERT_FALSE(rep.results.empty()) << f;
        for (const auto& r : rep.results) EXPECT_TRUE(r.passed) << r.op << " seed " << r.seed << " rel " << r.rel_error;
    }
}
