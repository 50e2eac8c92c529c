#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "dgseg/ops.hpp"
#include "dgseg/rng.hpp"
#include "oracles.hpp"

using namespace dgseg;

TEST(Tensor, ConstructorRejectsSizeMismatch) {
    EXPECT_THROW(Tensor<double>(Shape{2, 3}, std::vector<double>(5)), ShapeError);
}

TEST(Tensor, CopiesShareStorageDetachDoesNot) {
    Tensor<double> a(Shape{3}, {1, 2, 3}, true);
    Tensor<double> b = a;
    EXPECT_TRUE(a.same_storage(b));
    Tensor<double> c = a.detach();
    EXPECT_FALSE(a.same_storage(c));
    EXPECT_FALSE(c.requires_grad());
    EXPECT_EQ(c.data()[2], 3.0);
}

TEST(Tensor, AtIndexesRowMajor) {
    Tensor<double> a(Shape{2, 3}, {0, 1, 2, 3, 4, 5});
    EXPECT_EQ(a.at({1, 2}), 5.0);
    EXPECT_THROW(a.at({2, 0}), ShapeError);
    EXPECT_THROW(a.at({0}), ShapeError);
}

TEST(Broadcast, MatchesLoopOracle) {
    Rng r(3);
    const std::vector<std::pair<Shape, Shape>> cases = {
        {{2, 3, 4}, {4}}, {{2, 1, 4}, {3, 1}}, {{1}, {2, 2}}, {{5, 1, 1}, {1, 2, 3}}, {{2, 3}, {2, 3}}};
    for (const auto& [sa, sb] : cases) {
        const auto a = sample_normal<double>(r, sa);
        const auto b = sample_normal<double>(r, sb);
        const Tensor<double> c = a * b + a - b;
        const auto want = oracle::broadcast_apply(a, b, c.shape(), [](double x, double y) { return x * y + x - y; });
        ASSERT_EQ(c.numel(), want.size());
        for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(c.data()[i], want[i], 1e-12);
        const Tensor<double> q = a / (b * b + 1.0);
        const auto wq = oracle::broadcast_apply(a, b, q.shape(), [](double x, double y) { return x / (y * y + 1); });
        for (std::size_t i = 0; i < wq.size(); ++i) EXPECT_NEAR(q.data()[i], wq[i], 1e-12);
    }
}

TEST(Broadcast, IncompatibleShapesThrow) {
    const auto a = Tensor<double>::zeros({2, 3});
    const auto b = Tensor<double>::zeros({4});
    EXPECT_THROW(a + b, ShapeError);
}

TEST(Broadcast, GradientReducesOverBroadcastAxes) {
    Tensor<double> a = Tensor<double>::full({2, 3}, 1.0, true);
    Tensor<double> b = Tensor<double>::full({3}, 2.0, true);
    Tape<double> tape;
    {
        TapeScope<double> scope(tape);
        tape.backward(sum(a * b));
    }
    for (double g : a.grad()) EXPECT_EQ(g, 2.0);
    for (double g : b.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Tape, BackwardRequiresScalar) {
    Tensor<double> a = Tensor<double>::full({2}, 1.0, true);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    const Tensor<double> y = a * 2.0;
    EXPECT_THROW(tape.backward(y), ShapeError);
}

TEST(Tape, NoGradScopeRecordsNothing) {
    Tensor<double> a = Tensor<double>::full({2}, 1.0, true);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    {
        NoGradScope<double> off;
        const auto y = sum(a * a);
        (void)y;
    }
    EXPECT_EQ(tape.size(), 0u);
    const auto z = sum(a * a);
    EXPECT_GT(tape.size(), 0u);
}

TEST(Tape, GradientAccumulatesThroughReuse) {
    Tensor<double> x(Shape{1}, {3.0}, true);
    Tape<double> tape;
    {
        TapeScope<double> scope(tape);
        tape.backward(sum(x * x * x));  // d/dx x^3 = 27
    }
    EXPECT_NEAR(x.grad()[0], 27.0, 1e-12);
}

TEST(Numerics, NonFiniteResultThrows) {
    const Tensor<double> a(Shape{2}, {1.0, 0.0});
    EXPECT_THROW(log(a), NumericError);
    EXPECT_THROW(a / Tensor<double>(Shape{2}, {1.0, 0.0}), NumericError);
    const Tensor<float> big(Shape{1}, {1e30f});
    EXPECT_THROW(big * big, NumericError);
}

TEST(Numerics, CastPreservesValues) {
    const Tensor<double> a(Shape{3}, {0.5, -1.25, 3.0});
    const Tensor<float> f = a.cast<float>();
    EXPECT_EQ(f.shape(), a.shape());
    EXPECT_FLOAT_EQ(f.data()[1], -1.25f);
}
