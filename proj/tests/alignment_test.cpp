#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "fixtures.hpp"
#include "klink/alignment.hpp"
#include "klink/gradcheck.hpp"
#include "klink/layers.hpp"
#include "klink/model.hpp"
#include "oracles.hpp"

using namespace klink;
using T = double;

namespace {

Tensor<T> eye(std::size_t d) {
    Tensor<T> t(Shape{d, d});
    for (std::size_t i = 0; i < d; ++i) t.at(i, i) = 1.0;
    return t;
}

/// Rows whose pairwise dot products all equal c: a shared vector plus nothing else.
Tensor<T> constant_rows(std::size_t n, std::size_t d, double v) { return Tensor<T>(Shape{n, d}, v); }

std::vector<Tensor<T>> gradients(KLinkModel<T>& model, const std::vector<const MtsSample*>& batch, const LossWeights& w, Embedder& emb) {
    for (auto* p : model.parameters()) p->zero_grad();
    Graph<T> g;
    g.backward(model.forward(g, batch, true, w, &emb).total);
    std::vector<Tensor<T>> out;
    for (auto* p : model.parameters()) out.push_back(p->grad);
    return out;
}

}  // namespace

TEST(InfoNce, UniformSimilarityEqualsLogOfNegatives) {
    Graph<T> g;
    for (std::size_t n : {2u, 3u, 12u, 140u}) {
        auto a = g.constant(constant_rows(n, 4, 0.3));
        auto loss = sensor_level_loss(a, a, g.constant(eye(4)), 0.1);
        EXPECT_NEAR(loss.item(), std::log(double(n - 1)), 1e-9) << n;
    }
    EXPECT_NEAR(std::log(139.0), 4.9345, 1e-4);
    auto b = g.constant(constant_rows(300, 3, -0.2));
    EXPECT_NEAR(label_level_loss(b, b, 0.1).item(), std::log(299.0), 1e-9);
    EXPECT_NEAR(std::log(299.0), 5.700, 1e-3);
}

TEST(InfoNce, ThreeNodeHandCaseTauOne) {
    Graph<T> g;
    auto s = Tensor<T>::matrix({{1, 0}, {0, 2}, {1, 1}});
    auto k = Tensor<T>::matrix({{0.5, 0.5}, {1, -1}, {0, 1}});
    auto loss = sensor_level_loss(g.constant(s), g.constant(k), g.constant(eye(2)), 1.0).item();
    // sims: row0 [0.5,1,0], row1 [1,-2,2], row2 [1,0,1]
    const double expect = ((std::log(std::exp(1.0) + std::exp(0.0)) - 0.5) + (std::log(std::exp(1.0) + std::exp(2.0)) + 2.0) +
                           (std::log(std::exp(1.0) + std::exp(0.0)) - 1.0)) /
                          3.0;
    EXPECT_NEAR(loss, expect, 1e-12);
}

TEST(InfoNce, SensorLevelMatchesBruteForce) {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + rng.below(11), d = 1 + rng.below(5);
        const double tau = rng.uniform(0.05, 2.0);
        Graph<T> g;
        auto zs = normal_tensor<T>(Shape{n, d}, 1.0, rng), zk = normal_tensor<T>(Shape{n, d}, 1.0, rng);
        auto wm = normal_tensor<T>(Shape{d, d}, 0.5, rng);
        auto loss = sensor_level_loss(g.constant(zs), g.constant(zk), g.constant(wm), tau).item();
        EXPECT_NEAR(loss, oracle::sensor_level(oracle::from_tensor(zs), oracle::from_tensor(zk), oracle::from_tensor(wm), tau), 1e-10);
    }
}

TEST(InfoNce, LabelLevelMatchesBruteForce) {
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t b = 2 + rng.below(5), d = 1 + rng.below(12);
        const double tau = rng.uniform(0.1, 2.0);
        Graph<T> g;
        auto gs = normal_tensor<T>(Shape{b, d}, 0.5, rng), gk = normal_tensor<T>(Shape{b, d}, 0.5, rng);
        EXPECT_NEAR(label_level_loss(g.constant(gs), g.constant(gk), tau).item(),
                    oracle::label_level(oracle::from_tensor(gs), oracle::from_tensor(gk), tau), 1e-10);
    }
}

TEST(InfoNce, LabelLevelThreeSampleHalfTemperature) {
    Graph<T> g;
    auto gs = Tensor<T>::matrix({{1, 0, 1}, {0, 1, 0}, {1, 1, 1}});
    auto gk = Tensor<T>::matrix({{0, 0, 1}, {1, 0, 0}, {0.5, 0.5, 0}});
    EXPECT_NEAR(label_level_loss(g.constant(gs), g.constant(gk), 0.5).item(),
                oracle::label_level(oracle::from_tensor(gs), oracle::from_tensor(gk), 0.5), 1e-12);
}

TEST(InfoNce, LowerPositiveSimilarityRaisesLoss) {
    auto loss_for = [](double pos) {
        Graph<T> g;
        auto s = Tensor<T>::matrix({{pos, 0.2, -0.1}, {0.4, 1.0, 0.3}, {0.0, 0.5, 0.8}});
        return info_nce_excluding_positive(g.constant(s), 0.5).item();
    };
    EXPECT_LT(loss_for(1.0), loss_for(0.5));
    EXPECT_LT(loss_for(0.5), loss_for(-0.5));
}

TEST(InfoNce, PositiveWhenNegativesDominate) {
    Graph<T> g;
    auto s = Tensor<T>::matrix({{-1, 2, 2}, {2, -1, 2}, {2, 2, -1}});
    EXPECT_GT(info_nce_excluding_positive(g.constant(s), 1.0).item(), 0.0);
}

TEST(InfoNce, RejectsBadInputs) {
    Graph<T> g;
    auto a = g.constant(Tensor<T>(Shape{3, 2}, 1.0));
    EXPECT_THROW(sensor_level_loss(a, a, g.constant(eye(2)), 0.0), Error);
    EXPECT_THROW(sensor_level_loss(a, a, g.constant(eye(2)), -1.0), Error);
    auto one = g.constant(Tensor<T>(Shape{1, 2}, 1.0));
    EXPECT_THROW(label_level_loss(one, one, 0.1), Error);
    EXPECT_THROW(label_level_loss(a, g.constant(Tensor<T>(Shape{3, 3})), 0.1), Error);
}

TEST(InfoNce, CosineOptionNormalizesRows) {
    Graph<T> g;
    auto a = g.constant(Tensor<T>::matrix({{3, 0}, {0, 5}}));
    auto b = g.constant(Tensor<T>::matrix({{1, 0}, {0, 1}}));
    const auto& s = similarity_matrix(a, b, Similarity::cosine).value();
    EXPECT_NEAR(s.at(0, 0), 1.0, 1e-15);
    EXPECT_NEAR(s.at(0, 1), 0.0, 1e-15);
}

TEST(EdgeLoss, IdenticalIsZeroAndHandValues) {
    Graph<T> g;
    auto a = Tensor<T>::matrix({{0.6, 0.4}, {0.3, 0.7}});
    EXPECT_NEAR(edge_loss(g.constant(a), g.constant(a)).item(), 0.0, 1e-9);
    auto b = Tensor<T>::matrix({{0.5, 0.3}, {0.2, 0.6}});
    EXPECT_NEAR(edge_loss(g.constant(a), g.constant(b)).item(), 0.01, 1e-12);
    EXPECT_NEAR(edge_loss(g.constant(b), g.constant(a)).item(), edge_loss(g.constant(a), g.constant(b)).item(), 1e-15);
}

TEST(EdgeLoss, UniformVersusOneHotClosedForm) {
    const std::size_t n = 4;
    Tensor<T> u(Shape{n, n}, 1.0 / n), h(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) h.at(i, (i + 1) % n) = 1.0;
    Graph<T> g;
    const double per_row = ((n - 1) * std::pow(1.0 / n, 2) + std::pow(1.0 - 1.0 / n, 2));
    const double closed = per_row * n / double(n * n);
    EXPECT_NEAR(edge_loss(g.constant(u), g.constant(h)).item(), closed, 1e-15);
    EXPECT_NEAR(closed, oracle::edge(oracle::from_tensor(u), oracle::from_tensor(h)), 1e-15);
}

TEST(EdgeLoss, MatchesBruteForce) {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + rng.below(11);
        Graph<T> g;
        auto a = softmax_rows(g.constant(normal_tensor<T>(Shape{n, n}, 1.0, rng)));
        auto b = softmax_rows(g.constant(normal_tensor<T>(Shape{n, n}, 1.0, rng)));
        EXPECT_NEAR(edge_loss(a, b).item(), oracle::edge(oracle::from_tensor(a.value()), oracle::from_tensor(b.value())), 1e-10);
    }
    Graph<T> g;
    EXPECT_THROW(edge_loss(g.constant(Tensor<T>(Shape{2, 2})), g.constant(Tensor<T>(Shape{3, 3}))), Error);
}

TEST(Combined, AllZeroWeightsReturnsDownstream) {
    Graph<T> g;
    auto d = g.constant(Tensor<T>::scalar(2.0));
    std::vector<Var<T>> s{g.constant(Tensor<T>::scalar(5.0))};
    auto l = g.constant(Tensor<T>::scalar(7.0));
    LossWeights w;
    w.lambda_sensor = w.lambda_label = w.lambda_edge = 0.0;
    auto total = combined_loss(d, std::span<const Var<T>>(s), &l, std::span<const Var<T>>(s), w);
    EXPECT_EQ(total.id, d.id);
}

TEST(Combined, WeightedBatchSums) {
    Graph<T> g;
    auto d = g.constant(Tensor<T>::scalar(2.0));
    std::vector<Var<T>> s{g.constant(Tensor<T>::scalar(std::log(139.0)))};
    LossWeights w;
    w.lambda_label = w.lambda_edge = 0.0;
    EXPECT_NEAR(combined_loss(d, std::span<const Var<T>>(s), static_cast<const Var<T>*>(nullptr), std::span<const Var<T>>(), w).item(), 2.000493, 1e-6);

    std::vector<Var<T>> two{g.constant(Tensor<T>::scalar(1.0)), g.constant(Tensor<T>::scalar(3.0))};
    auto l = g.constant(Tensor<T>::scalar(0.5));
    LossWeights all{0.1, 0.5, 2.0, 0.25};
    EXPECT_NEAR(combined_loss(d, std::span<const Var<T>>(two), &l, std::span<const Var<T>>(two), all).item(), 2.0 + 0.5 * 4 + 2.0 * 0.5 + 0.25 * 4,
                1e-15);
}

TEST(Combined, UniformSixClassCrossEntropy) {
    Graph<T> g;
    auto ce = cross_entropy(g.constant(Tensor<T>(Shape{3, 6})), {0, 3, 5});
    EXPECT_NEAR(ce.item(), std::log(6.0), 1e-12);
    EXPECT_NEAR(std::log(6.0), 1.7918, 1e-4);
}

TEST(Combined, ZeroWeightZeroesThatTermsGradients) {
    auto cfg = fixture::tiny_config();
    KLinkModel<T> model(cfg, 5);
    auto samples = fixture::random_samples(cfg, 3, 6);
    std::vector<const MtsSample*> batch{&samples[0], &samples[1], &samples[2]};
    Embedder emb(std::nullopt, 0);
    LossWeights w{0.5, 1.0, 1.0, 1.0};

    auto no_s = w;
    no_s.lambda_sensor = 0;
    gradients(model, batch, no_s, emb);
    for (auto v : model.align.signal.grad.values()) EXPECT_EQ(v, 0.0);

    auto no_l = w;
    no_l.lambda_label = 0;
    gradients(model, batch, no_l, emb);
    for (auto v : model.align.knowledge.grad.values()) EXPECT_EQ(v, 0.0);

    auto none = w;
    none.lambda_sensor = none.lambda_label = none.lambda_edge = 0;
    gradients(model, batch, none, emb);
    for (auto* p : model.heads.parameters())
        for (auto v : p->grad.values()) EXPECT_EQ(v, 0.0);
}

TEST(Combined, ZeroWeightsMatchSignalOnlyForward) {
    auto cfg = fixture::tiny_config();
    KLinkModel<T> a(cfg, 8), b(cfg, 8);
    auto samples = fixture::random_samples(cfg, 2, 9);
    std::vector<const MtsSample*> batch{&samples[0], &samples[1]};
    Embedder emb(std::nullopt, 0);
    LossWeights zero;
    zero.lambda_sensor = zero.lambda_label = zero.lambda_edge = 0.0;
    auto ga = gradients(a, batch, zero, emb);
    for (auto* p : b.parameters()) p->zero_grad();
    Graph<T> g;
    g.backward(b.forward(g, batch, true, zero, nullptr).total);
    auto pb = b.parameters();
    for (std::size_t k = 0; k < pb.size(); ++k) EXPECT_EQ(ga[k], pb[k]->grad) << pb[k]->name;
}

TEST(Combined, FullLossPassesFiniteDifferences) {
    for (auto task : {TaskKind::classification, TaskKind::regression}) {
        auto cfg = fixture::tiny_config(task);
        cfg.text_dim = 16;
        KLinkModel<T> model(cfg, 11);
        auto samples = fixture::random_samples(cfg, 2, 12);
        std::vector<const MtsSample*> batch{&samples[0], &samples[1]};
        Embedder emb(std::nullopt, 3, 16);
        LossWeights w{0.5, 0.7, 0.9, 1.3};
        // dead directions (sensor rows of W_r under the label loss) make 64-bit differences pure rounding
        KLinkModel<long double> mirror(cfg, 11);
        auto report = finite_difference_check(
            [&](Graph<T>& g) { return model.forward(g, batch, true, w, &emb).total; }, model.parameters(),
            [&](Graph<long double>& g) { return mirror.forward(g, batch, true, w, &emb).total; }, mirror.parameters(), 1e-5L, 1e-4);
        EXPECT_TRUE(report.passed) << report.worst_parameter << "[" << report.worst_index << "] analytic " << report.worst_analytic
                                   << " numeric " << report.worst_numeric << " rel " << report.max_rel_error;
    }
}
