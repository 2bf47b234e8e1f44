#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "klink/gradcheck.hpp"
#include "klink/model.hpp"
#include "oracles.hpp"

using namespace klink;
using T = double;

namespace {

std::vector<std::vector<Tensor<double>>> patches_of(const MtsSample& s, std::size_t f) { return {partition(s, f).patches}; }

Var<T> random_nodes(Graph<T>& g, std::size_t rows, std::size_t dim, Rng& rng, double scale = 1.0) {
    return g.constant(normal_tensor<T>(Shape{rows, dim}, scale, rng));
}

Tensor<T> identity(std::size_t d) {
    Tensor<T> t(Shape{d, d});
    for (std::size_t i = 0; i < d; ++i) t.at(i, i) = 1.0;
    return t;
}

}  // namespace

TEST(Encoder, TurbofanConfigGives140By56) {
    auto cfg = preset_config("fd002");
    Rng rng(1);
    SignalBranch<T> sb(cfg.encoder, cfg.patch_size, rng);
    auto samples = fixture::random_samples(cfg, 1, 2);
    Graph<T> g;
    auto z = encode_sensors(g, sb, patches_of(samples[0], 5), true);
    EXPECT_EQ(z[0].shape(), (Shape{140, 56}));
}

TEST(Encoder, IdenticalPatchesGiveIdenticalRows) {
    auto cfg = fixture::tiny_config();
    Rng rng(3);
    SignalBranch<T> sb(cfg.encoder, cfg.patch_size, rng);
    MtsSample s;
    s.signal = Tensor<double>::matrix({{1, 2, 1, 2}, {1, 2, 1, 2}, {1, 2, 1, 2}});
    for (bool training : {false, true}) {
        Graph<T> g;
        const auto& z = encode_sensors(g, sb, patches_of(s, 2), training)[0].value();
        for (std::size_t r = 1; r < z.dim(0); ++r)
            for (std::size_t c = 0; c < z.dim(1); ++c) EXPECT_EQ(z.at(r, c), z.at(0, c));
    }
}

TEST(Encoder, ZeroInputWithZeroBiasGivesEqualRows) {
    auto cfg = preset_config("fd002");
    Rng rng(5);
    SignalBranch<T> sb(cfg.encoder, cfg.patch_size, rng);
    sb.encoder_out.bias.value.fill(0.0);
    MtsSample s;
    s.signal = Tensor<double>(Shape{14, 50});
    Graph<T> g;
    const auto& z = encode_sensors(g, sb, patches_of(s, 5), true)[0].value();
    for (std::size_t r = 1; r < z.dim(0); ++r)
        for (std::size_t c = 0; c < z.dim(1); ++c) EXPECT_EQ(z.at(r, c), z.at(0, c));
}

TEST(Encoder, PoolingToZeroNamesBlock) {
    SensorEncoderConfig cfg{{1, 4, 4, 4}, 2, 8, {8, 1}};
    try {
        encoded_length(5, cfg);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("block 2"), std::string::npos);
    }
    EXPECT_EQ(encoded_length(8, cfg), 1u);
}

TEST(Encoder, ConfigValidation) {
    EXPECT_THROW((SensorEncoderConfig{{2, 4}, 2, 4, {4, 1}}.validate()), Error);
    EXPECT_THROW((SensorEncoderConfig{{1, 0}, 2, 4, {4, 1}}.validate()), Error);
    EXPECT_THROW((SensorEncoderConfig{{1, 4}, 2, 4, {4}}.validate()), Error);
}

TEST(Positional, FirstPatchIsSinZeroCosOne) {
    auto pe = positional_encoding(3, 8);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_DOUBLE_EQ(pe.at(0, j), j % 2 == 0 ? 0.0 : 1.0);
    EXPECT_DOUBLE_EQ(pe.at(1, 0), std::sin(1.0));
    EXPECT_DOUBLE_EQ(pe.at(2, 1), std::cos(2.0));
}

TEST(Positional, SameOffsetForAllSensorsOfAPatch) {
    Graph<T> g;
    auto z = add_positional_encoding(g.constant(Tensor<T>(Shape{6, 4})), 2, 3);
    for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t i = 1; i < 3; ++i)
            for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(z.value().at(t * 3 + i, j), z.value().at(t * 3, j));
    EXPECT_THROW(add_positional_encoding(g.constant(Tensor<T>(Shape{5, 4})), 2, 3), Error);
}

TEST(Positional, ShiftByPatchCountChangesEveryDimension) {
    auto pe = positional_encoding(20, 56);
    for (std::size_t t = 0; t < 10; ++t)
        for (std::size_t j = 0; j < 56; ++j) EXPECT_NE(pe.at(t, j), pe.at(t + 10, j)) << "t=" << t << " j=" << j;
}

TEST(Graph, IdenticalFeaturesGiveUniformEdges) {
    Graph<T> g;
    Rng rng(7);
    for (std::size_t n : {6u, 140u}) {
        auto z = g.constant(Tensor<T>(Shape{n, 4}, 0.3));
        auto sg = construct_graph(z, g.constant(normal_tensor<T>(Shape{4, 4}, 1.0, rng)), n, 1);
        for (auto v : sg.edges.value().values()) EXPECT_NEAR(v, 1.0 / double(n), 1e-15);
    }
    EXPECT_NEAR(1.0 / 140.0, 0.007143, 1e-6);
}

TEST(Graph, TwoNodeHandExample) {
    Graph<T> g;
    auto sg = construct_graph(g.constant(Tensor<T>::matrix({{1, 0}, {0, 1}})), g.constant(identity(2)), 2, 1);
    EXPECT_EQ(sg.logits.value(), Tensor<T>::matrix({{1, 0}, {0, 1}}));
    EXPECT_NEAR(sg.edges.value().at(0, 0), 0.7311, 1e-4);
    EXPECT_NEAR(sg.edges.value().at(0, 1), 0.2689, 1e-4);
    EXPECT_NEAR(sg.edges.value().at(1, 1), 0.7311, 1e-4);
}

TEST(Graph, EdgesMatchBruteForce) {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        Graph<T> g;
        auto z = random_nodes(g, 8, 5, rng);
        auto w = g.constant(normal_tensor<T>(Shape{5, 5}, 0.5, rng));
        auto sg = construct_graph(z, w, 4, 2);
        auto expect = oracle::signal_edges(oracle::from_tensor(z.value()), oracle::from_tensor(w.value()));
        for (std::size_t i = 0; i < 8; ++i)
            for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(sg.edges.value().at(i, j), expect[i][j], 1e-12);
    }
}

TEST(Graph, RowsSumToOneGloballyAndPerWindow) {
    Rng rng(13);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + rng.below(4), lhat = 1 + rng.below(5), d = 2 + rng.below(4);
        const std::size_t m = 1 + rng.below(lhat);
        Graph<T> g;
        auto sg = construct_graph(random_nodes(g, n * lhat, d, rng, 2.0), g.constant(normal_tensor<T>(Shape{d, d}, 1.0, rng)), n, lhat);
        const auto& e = sg.edges.value();
        for (std::size_t r = 0; r < e.dim(0); ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < e.dim(1); ++c) s += e.at(r, c);
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
        for (std::size_t w = 0; w + m <= lhat; ++w) {
            const auto& we = softmax_rows(slice(sg.logits, w * n, m * n, w * n, m * n)).value();
            for (std::size_t r = 0; r < we.dim(0); ++r) {
                double s = 0.0;
                for (std::size_t c = 0; c < we.dim(1); ++c) s += we.at(r, c);
                EXPECT_NEAR(s, 1.0, 1e-6);
            }
        }
    }
}

TEST(Graph, SensorPermutationPermutesNodesAndEdges) {
    auto cfg = fixture::tiny_config();
    Rng rng(17);
    SignalBranch<T> sb(cfg.encoder, cfg.patch_size, rng);
    auto s = fixture::random_samples(cfg, 1, 4)[0];
    MtsSample p = s;
    const std::vector<std::size_t> perm{2, 0, 1};  // new sensor i is old sensor perm[i]
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t t = 0; t < 4; ++t) p.signal.at(i, t) = s.signal.at(perm[i], t);
    Graph<T> g;
    auto za = encode_sensors(g, sb, patches_of(s, 2), false)[0];
    auto zb = encode_sensors(g, sb, patches_of(p, 2), false)[0];
    auto ga = construct_graph(za, g.param(sb.graph_proj), 3, 2);
    auto gb = construct_graph(zb, g.param(sb.graph_proj), 3, 2);
    auto old_node = [&](std::size_t node) { return (node / 3) * 3 + perm[node % 3]; };
    for (std::size_t r = 0; r < 6; ++r) {
        for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(zb.value().at(r, c), za.value().at(old_node(r), c));
        for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(gb.edges.value().at(r, c), ga.edges.value().at(old_node(r), old_node(c)), 1e-15);
    }
}

TEST(Mpnn, FullWindowEqualsWholeGraphPass) {
    Rng rng(19);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t n = 3, lhat = 3, d = 4;
        Graph<T> g;
        auto sg = construct_graph(random_nodes(g, n * lhat, d, rng), g.constant(normal_tensor<T>(Shape{d, d}, 0.5, rng)), n, lhat);
        DenseLayer<T> upd = make_dense<T>("upd", d, d, rng);
        const auto& out = mpnn_propagate(g, sg, WindowSpec{lhat}, upd).value();
        auto h = oracle::matmul(oracle::from_tensor(sg.edges.value()), oracle::from_tensor(sg.nodes.value()));
        auto u = oracle::matmul(h, oracle::from_tensor(upd.weight.value));
        for (std::size_t i = 0; i < n * lhat; ++i)
            for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(out.at(i, j), std::max(0.0, u[i][j] + upd.bias.value[j]), 1e-12);
    }
}

TEST(Mpnn, UniformEdgesOnEqualFeaturesReturnFeatures) {
    Graph<T> g;
    Rng rng(23);
    auto z = g.constant(Tensor<T>(Shape{6, 3}, 0.7));
    auto sg = construct_graph(z, g.constant(normal_tensor<T>(Shape{3, 3}, 1.0, rng)), 3, 2);
    DenseLayer<T> upd{Parameter<T>("w", identity(3)), Parameter<T>("b", Tensor<T>(Shape{3}))};
    for (auto v : mpnn_propagate(g, sg, WindowSpec{2}, upd).value().values()) EXPECT_NEAR(v, 0.7, 1e-15);
}

TEST(Mpnn, OverlappingWindowsAverageMiddlePatch) {
    // 2 sensors, 3 patches, window 2: windows cover patches {0,1} and {1,2}.
    Rng rng(29);
    const std::size_t n = 2, lhat = 3, d = 3;
    Graph<T> g;
    auto sg = construct_graph(random_nodes(g, n * lhat, d, rng), g.constant(normal_tensor<T>(Shape{d, d}, 0.7, rng)), n, lhat);
    DenseLayer<T> upd = make_dense<T>("upd", d, d, rng);
    const auto& out = mpnn_propagate(g, sg, WindowSpec{2}, upd).value();

    const auto logits = oracle::from_tensor(sg.logits.value());
    const auto z = oracle::from_tensor(sg.nodes.value());
    const auto w = oracle::from_tensor(upd.weight.value);
    auto window_update = [&](std::size_t first_patch, std::size_t node) {
        const std::size_t r0 = first_patch * n;
        oracle::Mat row{std::vector<double>(logits[node].begin() + r0, logits[node].begin() + r0 + 2 * n)};
        row = oracle::softmax_rows(row);
        std::vector<double> h(d, 0.0);
        for (std::size_t k = 0; k < 2 * n; ++k)
            for (std::size_t j = 0; j < d; ++j) h[j] += row[0][k] * z[r0 + k][j];
        std::vector<double> u(d);
        for (std::size_t j = 0; j < d; ++j) {
            double s = upd.bias.value[j];
            for (std::size_t k = 0; k < d; ++k) s += h[k] * w[k][j];
            u[j] = std::max(0.0, s);
        }
        return u;
    };
    for (std::size_t node = 0; node < n * lhat; ++node) {
        const std::size_t t = node / n;
        std::vector<double> expect(d, 0.0);
        if (t == 0) expect = window_update(0, node);
        if (t == 2) expect = window_update(1, node);
        if (t == 1) {
            auto a = window_update(0, node), b = window_update(1, node);
            for (std::size_t j = 0; j < d; ++j) expect[j] = 0.5 * (a[j] + b[j]);
        }
        for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(out.at(node, j), expect[j], 1e-12) << "node " << node;
    }
}

TEST(Mpnn, WindowLargerThanPatchesRejected) {
    Graph<T> g;
    Rng rng(31);
    auto sg = construct_graph(random_nodes(g, 4, 2, rng), g.constant(identity(2)), 2, 2);
    DenseLayer<T> upd = make_dense<T>("upd", 2, 2, rng);
    EXPECT_THROW(mpnn_propagate(g, sg, WindowSpec{3}, upd), Error);
    EXPECT_THROW(mpnn_propagate(g, sg, WindowSpec{0}, upd), Error);
}

TEST(Pooling, MeanOfConsecutivePatchGroups) {
    Graph<T> g;
    // 2 sensors, 5 patches; rows carry their node index.
    Tensor<T> h(Shape{10, 1});
    for (std::size_t r = 0; r < 10; ++r) h[r] = double(r);
    const auto& p = temporal_pool(g.constant(h), 2, 5, WindowSpec{2}).value();
    ASSERT_EQ(p.shape(), (Shape{4, 1}));
    EXPECT_DOUBLE_EQ(p[0], (0.0 + 2.0) / 2);  // sensor 0, patches 0-1
    EXPECT_DOUBLE_EQ(p[1], (1.0 + 3.0) / 2);
    EXPECT_DOUBLE_EQ(p[2], (4.0 + 6.0) / 2);  // sensor 0, patches 2-3
    EXPECT_DOUBLE_EQ(p[3], (5.0 + 7.0) / 2);
}

TEST(Pooling, PresetRowCountsMatchHeadWidths) {
    EXPECT_EQ(preset_config("fd002").pooled_rows(), 14u * 5);
    EXPECT_EQ(preset_config("uci_har").pooled_rows(), 9u * 1);
    EXPECT_EQ(preset_config("isruc").pooled_rows(), 10u * 2);
    for (auto name : {"fd002", "fd004", "uci_har", "isruc", "synthetic"}) EXPECT_NO_THROW(preset_config(name).validate()) << name;
}

TEST(Head, RegressionAndClassificationOutputs) {
    for (auto name : {"fd002", "uci_har"}) {
        auto cfg = preset_config(name);
        KLinkModel<T> model(cfg, 1);
        auto samples = fixture::random_samples(cfg, 2, 3);
        auto out = model.predict({&samples[0], &samples[1]});
        EXPECT_EQ(out.shape(), (Shape{2, std::string(name) == "fd002" ? 1u : 6u}));
    }
}

TEST(Head, IdentityLayerCopiesReadout) {
    Graph<T> g;
    std::vector<DenseLayer<T>> head{{Parameter<T>("w", identity(4)), Parameter<T>("b", Tensor<T>(Shape{4}))}};
    auto z = g.constant(Tensor<T>::matrix({{1, 2}, {3, 4}}));
    std::vector<Var<T>> nodes{z};
    const auto& y = readout_and_head(g, std::span<const Var<T>>(nodes), head).value();
    EXPECT_EQ(y.values(), (std::vector<T>{1, 2, 3, 4}));
}

TEST(Head, WidthMismatchRejected) {
    Graph<T> g;
    Rng rng(37);
    std::vector<DenseLayer<T>> head{make_dense<T>("h", 5, 1, rng)};
    std::vector<Var<T>> nodes{g.constant(Tensor<T>(Shape{2, 2}))};
    EXPECT_THROW(readout_and_head(g, std::span<const Var<T>>(nodes), head), Error);
    auto cfg = preset_config("fd002");
    cfg.encoder.head_layers.front() = 56 * 14 * 9;
    EXPECT_THROW(cfg.validate(), Error);
}

TEST(SignalGradients, DownstreamLossPassesFiniteDifferences) {
    for (auto task : {TaskKind::classification, TaskKind::regression}) {
        auto cfg = fixture::tiny_config(task);
        KLinkModel<T> model(cfg, 41);
        auto samples = fixture::random_samples(cfg, 2, 43);
        std::vector<const MtsSample*> batch{&samples[0], &samples[1]};
        LossWeights none;
        none.lambda_sensor = none.lambda_label = none.lambda_edge = 0.0;
        auto report = finite_difference_check<T>([&](Graph<T>& g) { return model.forward(g, batch, true, none, nullptr).total; },
                                                 model.signal.parameters(), 1e-6, 1e-4);
        EXPECT_TRUE(report.passed) << report.worst_parameter << "[" << report.worst_index << "] rel " << report.max_rel_error;
    }
}
