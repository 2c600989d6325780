#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "tlstm/autodiff.hpp"

using namespace tlstm;
using namespace tlstm::ad;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0, 1);
    Tensor t(r, c);
    for (auto& x : t.data) x = n(rng);
    return t;
}

} // namespace

TEST(Tape, SigmoidAtZero) {
    Tape t;
    const Var x = t.leaf(Tensor(1, 1, 0.0), true);
    const Var y = t.sigmoid(x);
    EXPECT_EQ(t.value(y).data[0], 0.5);
    t.backward(y);
    EXPECT_EQ(t.grad(x).data[0], 0.25);
}

TEST(Tape, TanhAtZero) {
    Tape t;
    const Var x = t.leaf(Tensor(1, 1, 0.0), true);
    const Var y = t.tanh(x);
    EXPECT_EQ(t.value(y).data[0], 0.0);
    t.backward(y);
    EXPECT_EQ(t.grad(x).data[0], 1.0);
}

TEST(Tape, SigmoidStableForLargeInputs) {
    Tape t;
    const Var x = t.leaf(Tensor(1, 2, std::vector<double>{-800.0, 800.0}), true);
    const Var y = t.sigmoid(x);
    EXPECT_EQ(t.value(y).data[0], 0.0);
    EXPECT_EQ(t.value(y).data[1], 1.0);
}

TEST(Tape, MatmulShapes) {
    Tape t;
    const Var a = t.constant(Tensor(2, 3, 1.0));
    const Var b = t.constant(Tensor(3, 4, 2.0));
    const auto& c = t.value(t.matmul(a, b));
    EXPECT_EQ(c.rows, 2u);
    EXPECT_EQ(c.cols, 4u);
    EXPECT_EQ(c(1, 3), 6.0);
    EXPECT_THROW(t.matmul(b, b), ShapeError);
}

TEST(Tape, IdentityLossHasUnitGradient) {
    Tape t;
    const Var x = t.leaf(Tensor(1, 1, 7.0), true);
    t.backward(x);
    EXPECT_EQ(t.grad(x).data[0], 1.0);
}

TEST(Tape, SquareAtThree) {
    Tape t;
    const Var x = t.leaf(Tensor(1, 1, 3.0), true);
    t.backward(t.hadamard(x, x));
    EXPECT_EQ(t.grad(x).data[0], 6.0);
}

TEST(Tape, BroadcastColumnGradientSumsOverBatch) {
    Tape t;
    const Var m = t.constant(Tensor(2, 3, 1.0));
    const Var b = t.leaf(Tensor(2, 1, 0.5), true);
    const Var s = t.add(m, b);
    const Var loss = t.mse_reduce(s, t.constant(Tensor(2, 3, 0.0)));
    t.backward(loss);
    // d/db of mean((1+b)^2) over 6 entries, 3 per row
    EXPECT_DOUBLE_EQ(t.grad(b).data[0], 3 * 2 * 1.5 / 6.0);
}

TEST(Tape, NonScalarLossRejected) {
    Tape t;
    const Var x = t.leaf(Tensor(2, 1, 1.0), true);
    EXPECT_THROW(t.backward(x), ShapeError);
}

TEST(Tape, NonFiniteValueRejected) {
    Tape t;
    const Var x = t.leaf(Tensor(1, 1, std::numeric_limits<double>::max()), true);
    EXPECT_THROW(t.scalar_mul(x, 10.0), NumericError);
    EXPECT_THROW(t.leaf(Tensor(1, 1, std::nan("")), true), NumericError);
}

TEST(Tape, UnreachedLeafHasZeroGradient) {
    Tape t;
    const Var x = t.leaf(Tensor(2, 2, 1.0), true);
    const Var y = t.leaf(Tensor(1, 1, 2.0), true);
    t.backward(t.hadamard(y, y));
    for (double g : t.grad(x).data) EXPECT_EQ(g, 0.0);
}

TEST(Tape, GradientIsLinearInTheLoss) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor W = random_tensor(3, 4, rng), xv = random_tensor(4, 2, rng), target = random_tensor(3, 2, rng);
        auto run = [&](int which) {
            Tape t;
            const Var w = t.leaf(W, true);
            const Var x = t.constant(xv);
            const Var f = t.mse_reduce(t.tanh(t.matmul(w, x)), t.constant(target));
            const Var g = t.mse_reduce(t.sigmoid(t.matmul(w, x)), t.constant(Tensor(3, 2, 0.0)));
            t.backward(which == 0 ? f : which == 1 ? g : t.add(f, g));
            return t.grad(w);
        };
        const auto gf = run(0), gg = run(1), gs = run(2);
        for (std::size_t i = 0; i < gs.size(); ++i) EXPECT_NEAR(gs.data[i], gf.data[i] + gg.data[i], 1e-14);
    }
}

TEST(Tape, RepeatedGraphIsBitwiseDeterministic) {
    std::mt19937_64 rng(6);
    const Tensor W = random_tensor(5, 5, rng), xv = random_tensor(5, 3, rng);
    auto run = [&] {
        Tape t;
        const Var w = t.leaf(W, true);
        Var h = t.constant(xv);
        for (int k = 0; k < 3; ++k) h = t.tanh(t.matmul(w, h));
        const Var loss = t.mse_reduce(h, t.constant(Tensor(5, 3, 0.1)));
        t.backward(loss);
        return std::pair{t.value(loss).data, t.grad(w).data};
    };
    const auto a = run(), b = run();
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second, b.second);
}

TEST(Tape, BackwardTwiceGivesSameGradient) {
    Tape t;
    const Var x = t.leaf(Tensor(1, 1, 2.0), true);
    const Var y = t.hadamard(x, x);
    t.backward(y);
    t.backward(y);
    EXPECT_EQ(t.grad(x).data[0], 4.0);
}

TEST(GradientCheck, LinearFunctionIsExact) {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> n(0, 1);
    std::vector<double> a(12), theta(12);
    for (auto& v : a) v = n(rng);
    for (auto& v : theta) v = n(rng);
    auto f = [&](std::span<const double> th) {
        double s = 0.0;
        for (std::size_t i = 0; i < th.size(); ++i) s += a[i] * th[i];
        return s;
    };
    EXPECT_LT(gradient_check(f, theta, a), 1e-10);
}

TEST(GradientCheck, DetectsWrongGradient) {
    auto f = [](std::span<const double> th) { return th[0] * th[0]; };
    const std::vector<double> wrong = {1.0};
    EXPECT_GT(gradient_check(f, {3.0}, wrong), 0.1);
}

TEST(GradientCheck, TapeCompositeAgreesWithDifferences) {
    std::mt19937_64 rng(8);
    const Tensor W0 = random_tensor(3, 4, rng), xv = random_tensor(4, 5, rng), b0 = random_tensor(3, 1, rng);
    auto loss = [&](const Tensor& W, const Tensor& b, Tensor* gW) {
        Tape t;
        const Var w = t.leaf(W, true), bb = t.leaf(b, true);
        const Var z = t.add(t.matmul(w, t.constant(xv)), bb);
        const Var y = t.hadamard(t.sigmoid(z), t.tanh(t.scalar_mul(z, 0.7)));
        const Var l = t.mse_reduce(t.subtract(y, t.constant(Tensor(3, 5, 0.2))), t.constant(Tensor(3, 5, 0.0)));
        if (gW) {
            t.backward(l);
            *gW = t.grad(w);
        }
        return t.value(l).data[0];
    };
    Tensor g;
    loss(W0, b0, &g);
    auto f = [&](std::span<const double> th) {
        return loss(Tensor(3, 4, std::vector<double>(th.begin(), th.end())), b0, nullptr);
    };
    EXPECT_LT(gradient_check(f, W0.data, g.data), 1e-6);
}

TEST(GradientCheck, NonFiniteProbeThrows) {
    auto f = [](std::span<const double> th) { return th[0] > 1.0 ? std::nan("") : th[0]; };
    const std::vector<double> g = {1.0};
    EXPECT_THROW(gradient_check(f, {1.0}, g), NumericError);
}

TEST(RelativeError, Floor) {
    EXPECT_EQ(relative_error(0.0, 0.0), 0.0);
    EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0), 1e-9 / 1e-8);
    EXPECT_DOUBLE_EQ(relative_error(1.0, 3.0), 0.5);
}
