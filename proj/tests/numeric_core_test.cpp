#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "klink/autograd.hpp"
#include "klink/gradcheck.hpp"
#include "klink/layers.hpp"
#include "klink/optim.hpp"
#include "klink/random.hpp"

using namespace klink;
using T = double;

namespace {

Parameter<T> random_param(const std::string& name, Shape shape, Rng& rng, double scale = 1.0) {
    return Parameter<T>(name, normal_tensor<T>(std::move(shape), scale, rng));
}

}  // namespace

TEST(Forward, SoftmaxOfUniformLogitsIsUniform) {
    Graph<T> g;
    auto y = softmax_rows(g.constant(Tensor<T>::matrix({{0, 0}, {0, 0}})));
    for (auto v : y.value().values()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Forward, Relu) {
    Graph<T> g;
    auto y = relu(g.constant(Tensor<T>::vector({-1, 0, 2})));
    EXPECT_EQ(y.value().values(), (std::vector<T>{0, 0, 2}));
}

TEST(Forward, MatmulOfOnes) {
    Graph<T> g;
    auto y = matmul(g.constant(Tensor<T>(Shape{2, 3}, 1.0)), g.constant(Tensor<T>(Shape{3, 2}, 1.0)));
    EXPECT_EQ(y.shape(), (Shape{2, 2}));
    for (auto v : y.value().values()) EXPECT_DOUBLE_EQ(v, 3.0);
}

TEST(Forward, ShapeMismatchNamesOpAndShapes) {
    Graph<T> g;
    auto a = g.constant(Tensor<T>(Shape{2, 3}));
    auto b = g.constant(Tensor<T>(Shape{2, 3}));
    try {
        matmul(a, b);
        FAIL() << "expected rejection";
    } catch (const Error& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("matmul"), std::string::npos);
        EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    }
}

TEST(Forward, NonFiniteInputRejected) {
    Graph<T> g;
    EXPECT_THROW(g.constant(Tensor<T>::vector({1.0, std::nan("")})), Error);
    EXPECT_THROW(g.constant(Tensor<T>::vector({INFINITY})), Error);
    EXPECT_THROW(log(g.constant(Tensor<T>::vector({0.0}))), Error);
}

TEST(Forward, MaxpoolAndConvShapes) {
    Graph<T> g;
    auto x = g.constant(Tensor<T>(Shape{3, 1, 5}, 1.0));
    auto w = g.constant(Tensor<T>(Shape{4, 1, 2}, 1.0));
    auto y = conv1d(x, w);
    EXPECT_EQ(y.shape(), (Shape{3, 4, 5}));
    // kernel 2 pads one zero on the right
    EXPECT_DOUBLE_EQ(y.value().at(0, 0, 0), 2.0);
    EXPECT_DOUBLE_EQ(y.value().at(0, 0, 4), 1.0);
    EXPECT_EQ(maxpool1d(y).shape(), (Shape{3, 4, 2}));
    EXPECT_THROW(maxpool1d(g.constant(Tensor<T>(Shape{1, 1, 1}))), Error);
}

TEST(Backward, SumGivesOnes) {
    Parameter<T> w("w", Tensor<T>::vector({0.3, -2, 5}));
    Graph<T> g;
    g.backward(sum(g.param(w)));
    EXPECT_EQ(w.grad.values(), (std::vector<T>{1, 1, 1}));
}

TEST(Backward, MseAgainstZero) {
    Parameter<T> w("w", Tensor<T>::vector({2}));
    Graph<T> g;
    g.backward(mse(g.param(w), g.constant(Tensor<T>::vector({0}))));
    EXPECT_DOUBLE_EQ(w.grad[0], 4.0);
}

TEST(Backward, UnreachableLeafGetsZero) {
    Parameter<T> used("used", Tensor<T>::vector({1, 2}));
    Parameter<T> unused("unused", Tensor<T>::vector({3, 4}));
    unused.grad.fill(7.0);
    unused.zero_grad();
    Graph<T> g;
    auto u = g.param(unused);
    (void)relu(u);
    g.backward(sum(g.param(used)));
    EXPECT_EQ(unused.grad.values(), (std::vector<T>{0, 0}));
}

TEST(Backward, NonScalarLossRejected) {
    Parameter<T> w("w", Tensor<T>::vector({1, 2}));
    Graph<T> g;
    EXPECT_THROW(g.backward(g.param(w)), Error);
}

TEST(Backward, VisitsEachReachableNodeOnce) {
    Parameter<T> w("w", Tensor<T>::vector({1, 2}));
    Graph<T> g;
    auto x = g.param(w);
    auto a = scale(x, 2.0);
    auto b = mul(a, a);  // diamond: a used twice
    (void)exp(x);        // dead branch
    auto loss = sum(add(b, x));
    EXPECT_EQ(g.backward(loss), 5u);  // x, a, b, add, sum
    EXPECT_DOUBLE_EQ(w.grad[0], 8.0 * 1 + 1);
    EXPECT_DOUBLE_EQ(w.grad[1], 8.0 * 2 + 1);
}

TEST(Invariants, SoftmaxRowsAreDistributions) {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        Graph<T> g;
        auto y = softmax_rows(g.constant(normal_tensor<T>(Shape{4, 7}, 5.0, rng)));
        for (std::size_t i = 0; i < 4; ++i) {
            T s = 0;
            for (std::size_t j = 0; j < 7; ++j) {
                const T v = y.value().at(i, j);
                EXPECT_GT(v, 0.0);
                EXPECT_LT(v, 1.0);
                s += v;
            }
            EXPECT_NEAR(s, 1.0, 1e-9);
        }
    }
}

TEST(Invariants, DeterministicForward) {
    auto run = [] {
        Rng rng(11);
        Parameter<T> w = random_param("w", {3, 4}, rng);
        Graph<T> g;
        auto x = g.constant(normal_tensor<T>(Shape{5, 3}, 1.0, rng));
        return softmax_rows(matmul(x, g.param(w))).value();
    };
    EXPECT_EQ(run(), run());
}

// Every op kind passes a random-input central-difference check.
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
    Rng rng(100 + GetParam());
    Parameter<T> a = random_param("a", {3, 4}, rng);
    Parameter<T> b = random_param("b", {4, 2}, rng);
    Parameter<T> c = random_param("c", {3, 4}, rng);
    Parameter<T> pos("pos", uniform_tensor<T>(Shape{3, 4}, 1.0, rng));
    for (auto& v : pos.value.values()) v = 1.5 + v;
    Parameter<T> x3 = random_param("x3", {4, 2, 6}, rng);
    Parameter<T> w3 = random_param("w3", {3, 2, 3}, rng, 0.5);
    Parameter<T> bias3 = random_param("bias3", {3}, rng);
    Parameter<T> gamma = random_param("gamma", {2}, rng);
    Parameter<T> beta = random_param("beta", {2}, rng);
    Parameter<T> sq = random_param("sq", {4, 4}, rng);
    Parameter<T> row = random_param("row", {4}, rng);
    BatchNormStats<T> stats(2);

    std::vector<Parameter<T>*> params;
    std::function<Var<T>(Graph<T>&)> fn;
    switch (GetParam()) {
        case 0:
            params = {&a, &b};
            fn = [&](Graph<T>& g) { return sum(matmul(g.param(a), g.param(b))); };
            break;
        case 1:
            params = {&a, &c};
            fn = [&](Graph<T>& g) { return sum(mul(matmul_nt(g.param(a), g.param(c)), matmul_nt(g.param(a), g.param(a)))); };
            break;
        case 2:
            params = {&a};
            fn = [&](Graph<T>& g) { return sum(mul(relu(g.param(a)), g.param(a))); };
            break;
        case 3:
            params = {&a, &c};
            fn = [&](Graph<T>& g) { return sum(mul(softmax_rows(g.param(a)), g.param(c))); };
            break;
        case 4:
            params = {&a};
            fn = [&](Graph<T>& g) { return mean(mul(log_softmax_rows(g.param(a)), g.param(a))); };
            break;
        case 5:
            params = {&x3, &w3, &bias3};
            fn = [&](Graph<T>& g) {
                auto y = conv1d(g.param(x3), g.param(w3), g.param(bias3));
                return sum(mul(y, y));
            };
            break;
        case 6:
            params = {&x3};
            fn = [&](Graph<T>& g) {
                auto y = maxpool1d(g.param(x3));
                return sum(mul(y, y));
            };
            break;
        case 7:
            params = {&x3, &gamma, &beta};
            fn = [&](Graph<T>& g) {
                auto y = batchnorm1d(g.param(x3), g.param(gamma), g.param(beta), stats, true);
                return sum(mul(y, exp(y)));
            };
            break;
        case 8:
            params = {&x3, &gamma, &beta};
            fn = [&](Graph<T>& g) {
                auto y = batchnorm1d(g.param(x3), g.param(gamma), g.param(beta), stats, false);
                return sum(mul(y, y));
            };
            break;
        case 9:
            params = {&a, &c};
            fn = [&](Graph<T>& g) {
                std::vector<Var<T>> parts{g.param(a), scale(g.param(c), 2.0), g.param(a)};
                auto v0 = concat(std::span<const Var<T>>(parts), 0);
                auto v1 = concat(std::span<const Var<T>>(parts), 1);
                return add(sum(mul(v0, v0)), mean(exp(v1)));
            };
            break;
        case 10:
            params = {&pos, &c};
            fn = [&](Graph<T>& g) { return mse(log(g.param(pos)), g.param(c)); };
            break;
        case 11:
            params = {&sq};
            fn = [&](Graph<T>& g) {
                auto s = g.param(sq);
                return sum(sub(diagonal(s), logsumexp_rows(s, true)));
            };
            break;
        case 12:
            params = {&a, &row, &c};
            fn = [&](Graph<T>& g) {
                auto y = add_bias(g.param(a), g.param(row));
                auto blk = slice(y, 1, 2, 1, 3);
                auto z = add(broadcast_rows(g.param(row), 3), g.param(c));
                return add(sum(mul(blk, blk)), sum(mul(transpose(z), reshape(g.param(a), {4, 3}))));
            };
            break;
        case 13:
            params = {&a};
            fn = [&](Graph<T>& g) {
                return add(cross_entropy(g.param(a), {0, 3, 1}), sum(pick(g.param(a), {2, 2, 0})));
            };
            break;
        case 14:
            params = {&a, &c};
            fn = [&](Graph<T>& g) {
                std::vector<Var<T>> parts{g.param(a), g.param(c), mul(g.param(a), g.param(c))};
                return sum(mul(mean_n(std::span<const Var<T>>(parts)), g.param(c)));
            };
            break;
    }
    auto report = finite_difference_check<T>(fn, params, 1e-6, 1e-4);
    EXPECT_TRUE(report.passed) << "op case " << GetParam() << ": " << report.max_rel_error << " at " << report.worst_parameter
                               << "[" << report.worst_index << "] analytic=" << report.worst_analytic
                               << " numeric=" << report.worst_numeric;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range(0, 15));

TEST(GradCheck, QuadraticLossIsExact) {
    Parameter<T> w("w", Tensor<T>::vector({0.5, -1.5, 3.0}));
    auto report = finite_difference_check<T>(
        [&](Graph<T>& g) {
            auto x = g.param(w);
            return sum(mul(x, x));
        },
        {&w}, 1e-5, 1e-6);
    EXPECT_TRUE(report.passed);
    EXPECT_LT(report.max_rel_error, 1e-6);
}

TEST(GradCheck, ConstantLossHasZeroError) {
    Parameter<T> w("w", Tensor<T>::vector({0.5, -1.5}));
    auto report = finite_difference_check<T>([&](Graph<T>& g) { return sum(g.constant(Tensor<T>::vector({1, 2}))); }, {&w},
                                             1e-5, 1e-6);
    EXPECT_EQ(report.max_rel_error, 0.0);
    EXPECT_TRUE(report.passed);
}

TEST(GradCheck, RejectsNonPositiveEps) {
    Parameter<T> w("w", Tensor<T>::vector({1}));
    EXPECT_THROW(finite_difference_check<T>([&](Graph<T>& g) { return sum(g.param(w)); }, {&w}, 0.0, 1e-6), Error);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    Parameter<T> w("w", Tensor<T>::vector({1, -2}));
    w.zero_grad();
    AdamState<T> state;
    for (int i = 0; i < 3; ++i) adam_step(state, std::vector<Parameter<T>*>{&w});
    EXPECT_EQ(w.value.values(), (std::vector<T>{1, -2}));
    EXPECT_EQ(state.step, 3u);
    for (auto v : state.first_moment[0].values()) EXPECT_EQ(v, 0.0);
}

TEST(Adam, MomentsDecayAfterGradientStops) {
    Parameter<T> w("w", Tensor<T>::vector({1}));
    AdamState<T> state;
    w.grad[0] = 1.0;
    adam_step(state, std::vector<Parameter<T>*>{&w});
    const T m1 = state.first_moment[0][0];
    w.grad[0] = 0.0;
    adam_step(state, std::vector<Parameter<T>*>{&w});
    EXPECT_NEAR(state.first_moment[0][0], 0.9 * m1, 1e-15);
}

TEST(Adam, FirstStepMovesByLearningRateAgainstGradient) {
    Parameter<T> w("w", Tensor<T>::vector({0, 0}));
    w.grad = Tensor<T>::vector({0.37, -12.0});
    AdamState<T> state;
    state.learning_rate = 0.01;
    adam_step(state, std::vector<Parameter<T>*>{&w});
    EXPECT_NEAR(w.value[0], -0.01, 1e-9);
    EXPECT_NEAR(w.value[1], 0.01, 1e-9);
}

TEST(Adam, ConstantGradientStepApproachesLearningRate) {
    Parameter<T> w("w", Tensor<T>::vector({0}));
    AdamState<T> state;
    state.learning_rate = 1e-3;
    T prev = 0;
    T step = 0;
    for (int i = 0; i < 500; ++i) {
        w.grad[0] = -0.2;
        adam_step(state, std::vector<Parameter<T>*>{&w});
        step = w.value[0] - prev;
        prev = w.value[0];
    }
    EXPECT_NEAR(step, 1e-3, 1e-9);
}

TEST(Adam, ShapeMismatchRejected) {
    Parameter<T> w("w", Tensor<T>::vector({0, 0}));
    w.grad = Tensor<T>::vector({1});
    AdamState<T> state;
    EXPECT_THROW(adam_step(state, std::vector<Parameter<T>*>{&w}), Error);
}

TEST(Graph, ValueReferencesSurviveLaterOps) {
    Graph<double> g;
    auto a = g.constant(Tensor<double>::matrix({{1.0, 2.0}}));
    const auto& ref = a.value();
    auto x = a;
    for (int i = 0; i < 2000; ++i) x = scale(x, 1.0);
    EXPECT_EQ(&ref, &a.value());
    EXPECT_EQ(ref.at(0, 1), 2.0);
}
