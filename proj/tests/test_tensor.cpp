#include <gtest/gtest.h>

#include "cvmh/gradcheck.hpp"

using namespace cvmh;

TEST(Tensor, FromRejectsWrongSize) {
    EXPECT_THROW(Tensor<float>::from({2, 3}, std::vector<float>(5)), ConfigError);
    auto t = Tensor<float>::from({2, 3}, {1, 2, 3, 4, 5, 6});
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_EQ(t.dim(1), 3u);
    EXPECT_FLOAT_EQ(t[4], 5.0f);
}

TEST(Tensor, ItemNeedsScalar) {
    EXPECT_THROW(Tensor<float>::zeros({2}).item(), ConfigError);
    EXPECT_EQ(Tensor<float>::full({1}, 3.5f).item(), 3.5f);
}

TEST(Autograd, SumOfProductGivesInput) {
    // loss = sum(w * x)  ->  dloss/dw = x
    auto w = Tensor<double>::from({4}, {0.5, -1, 2, 3}, true);
    auto x = Tensor<double>::from({4}, {1, 2, 3, 4});
    backward(ops::sum(ops::mul(w, x)));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(w.grad()[i], x[i]);
}

TEST(Autograd, RepeatedBackwardAccumulates) {
    auto w = Tensor<double>::from({2}, {1, 2}, true);
    auto x = Tensor<double>::from({2}, {3, 4});
    backward(ops::sum(ops::mul(w, x)));
    backward(ops::sum(ops::mul(w, x)));
    EXPECT_DOUBLE_EQ(w.grad()[0], 6);
    EXPECT_DOUBLE_EQ(w.grad()[1], 8);
    w.zero_grad();
    EXPECT_DOUBLE_EQ(w.grad()[0], 0);
}

TEST(Autograd, UnreachableParameterKeepsZeroGrad) {
    auto a = Tensor<double>::from({2}, {1, 2}, true);
    auto b = Tensor<double>::from({2}, {5, 6}, true);
    b.grad();  // allocate
    backward(ops::sum(ops::mul(a, a)));
    EXPECT_DOUBLE_EQ(b.grad()[0], 0);
    EXPECT_DOUBLE_EQ(b.grad()[1], 0);
    EXPECT_DOUBLE_EQ(a.grad()[1], 4);
}

TEST(Autograd, NonScalarLossRejected) {
    auto a = Tensor<double>::from({2}, {1, 2}, true);
    EXPECT_THROW(backward(ops::mul(a, a)), ConfigError);
}

TEST(Autograd, NoGradGuardSkipsRecording) {
    auto a = Tensor<double>::from({2}, {1, 2}, true);
    NoGradGuard g;
    auto y = ops::sum(ops::mul(a, a));
    EXPECT_FALSE(y.requires_grad());
    EXPECT_THROW(backward(y), ConfigError);
}

TEST(Autograd, SharedSubexpressionGetsBothPaths) {
    // y = x*x + x  -> dy/dx = 2x + 1
    auto x = Tensor<double>::from({3}, {-1, 0.5, 2}, true);
    backward(ops::sum(ops::add(ops::mul(x, x), x)));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * x[i] + 1);
}

TEST(Autograd, DeepChainDoesNotOverflowStack) {
    auto x = Tensor<double>::from({1}, {1.0}, true);
    Tensor<double> y = x;
    for (int i = 0; i < 20000; ++i) y = ops::add_scalar(y, 1e-6);
    backward(ops::sum(y));
    EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
}

TEST(Autograd, BroadcastAddReducesGradient) {
    auto a = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    auto b = Tensor<double>::from({1, 3}, {1, 1, 1}, true);
    backward(ops::sum(ops::add(a, b)));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(b.grad()[i], 2.0);
}

TEST(Determinism, ForwardIsBitwiseRepeatable) {
    CVSSConfig c = gradcheck::small_block(8);
    Rng r1(5), r2(5);
    CVSSBlock<float> a("b", c, r1), b("b", c, r2);
    ParamSet<float> pa, pb;
    a.collect(pa);
    b.collect(pb);
    Rng noise(9);
    for (std::size_t i = 0; i < pa.params.size(); ++i)
        for (std::size_t k = 0; k < pa.params[i]->value.numel(); ++k) {
            const float v = static_cast<float>(noise.uniform(-0.3, 0.3));
            pa.params[i]->value[k] += v;
            pb.params[i]->value[k] += v;
        }
    Rng xr(1);
    std::vector<float> xv(2 * 8 * 5 * 6);
    for (auto& v : xv) v = static_cast<float>(xr.uniform(-1, 1));
    auto x = Tensor<float>::from({2, 8, 5, 6}, xv);
    auto ya = a(x), yb = b(x), ya2 = a(x);
    EXPECT_EQ(ya.values(), yb.values());
    EXPECT_EQ(ya.values(), ya2.values());
}

TEST(Determinism, ThreadCountDoesNotChangeResults) {
    CVSSConfig c = gradcheck::small_block(8);
    Rng r(3);
    CVSSBlock<float> blk("b", c, r);
    ParamSet<float> ps;
    blk.collect(ps);
    Rng noise(4);
    for (auto* p : ps.params)
        for (auto& v : p->value.values()) v += static_cast<float>(noise.uniform(-0.3, 0.3));
    Rng xr(2);
    std::vector<float> xv(4 * 8 * 4 * 4);
    for (auto& v : xv) v = static_cast<float>(xr.uniform(-1, 1));
    auto x = Tensor<float>::from({4, 8, 4, 4}, xv, true);
    const auto before = num_threads();
    set_num_threads(1);
    auto y1 = blk(x);
    backward(ops::sum(y1));
    std::vector<float> g1(ps.params[0]->value.grad().begin(), ps.params[0]->value.grad().end());
    ps.zero_grad();
    set_num_threads(3);
    auto y3 = blk(x);
    backward(ops::sum(y3));
    std::vector<float> g3(ps.params[0]->value.grad().begin(), ps.params[0]->value.grad().end());
    set_num_threads(before);
    EXPECT_EQ(y1.values(), y3.values());
    EXPECT_EQ(g1, g3);
}

TEST(GradCheck, HarnessDetectsCorruptedBackward) {
    for (std::uint64_t s = 1; s <= 5; ++s) {
        Rng rng(s);
        auto x = gradcheck::random({2, 5}, rng);
        auto r = check_gradients("corrupted", s, {x}, [&] { return gradcheck::corrupted_square(x); });
        EXPECT_FALSE(r.passed) << "seed " << s;
        EXPECT_GT(r.rel_error, 0.05);
    }
}

TEST(GradCheck, ElementwiseOps) {
    for (std::uint64_t s = 1; s <= 5; ++s) {
        Rng rng(s);
        auto a = gradcheck::random({2, 3}, rng);
        auto b = gradcheck::random({1, 3}, rng, 0.5, 2);
        auto r = check_gradients("elementwise", s, {a, b}, [&] {
            return ops::add(ops::sub(ops::mul(a, b), ops::exp(a)), ops::one_minus(ops::scale(b, 3.0)));
        });
        EXPECT_TRUE(r.passed) << r.rel_error;
    }
}
