#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "klink/autograd.hpp"
#include "klink/random.hpp"

namespace klink {

enum class DownstreamLoss { mse_regression, cross_entropy };

enum class Similarity {
    dot,     // raw dot product
    cosine,  // dot product of L2-normalized rows
};

/// Temperature and term weights of the combined objective. A zero weight
/// removes its term from the graph entirely.
struct LossWeights {
    double tau = 0.1;
    double lambda_sensor = 1e-4;
    double lambda_label = 1e-2;
    double lambda_edge = 1e-3;
    DownstreamLoss downstream = DownstreamLoss::cross_entropy;
    Similarity similarity = Similarity::dot;

    bool knowledge_active() const { return lambda_sensor != 0.0 || lambda_label != 0.0 || lambda_edge != 0.0; }

    void validate() const {
        if (!(tau > 0.0)) throw Error("loss weights: tau must be positive");
        if (lambda_sensor < 0.0 || lambda_label < 0.0 || lambda_edge < 0.0) throw Error("loss weights: lambdas must be non-negative");
    }
};

/// W_m maps signal node features before sensor-level matching; W_r maps
/// 2 d_h knowledge node features to d_h for the label-level readout.
template <typename T>
struct AlignmentProjection {
    Parameter<T> signal;     // W_m [d_h, d_h]
    Parameter<T> knowledge;  // W_r [2 d_h, d_h]

    AlignmentProjection() = default;
    AlignmentProjection(std::size_t hidden, Rng& rng) {
        signal = Parameter<T>("align.signal_proj", uniform_tensor<T>(Shape{hidden, hidden}, 1.0 / std::sqrt(double(hidden)), rng));
        knowledge = Parameter<T>("align.knowledge_proj", uniform_tensor<T>(Shape{2 * hidden, hidden}, 1.0 / std::sqrt(2.0 * double(hidden)), rng));
    }

    std::vector<Parameter<T>*> parameters() { return {&signal, &knowledge}; }
};

/// InfoNCE over a square similarity matrix whose diagonal holds the positive
/// pairs. The denominator sums the off-diagonal entries of each row only:
/// -mean_i [ s_ii / tau - log sum_{v != i} exp(s_iv / tau) ].
template <typename T>
Var<T> info_nce_excluding_positive(Var<T> sims, double tau) {
    if (!(tau > 0.0)) throw Error("info_nce: tau must be positive");
    const auto& s = sims.value();
    if (s.rank() != 2 || s.dim(0) != s.dim(1) || s.dim(0) < 2) {
        throw Error("info_nce: need a square similarity matrix of size >= 2, got " + shape_str(s.shape()));
    }
    auto scaled = scale(sims, static_cast<T>(1.0 / tau));
    return mean(sub(logsumexp_rows(scaled, true), diagonal(scaled)));
}

template <typename T>
Var<T> similarity_matrix(Var<T> a, Var<T> b, Similarity kind) {
    if (kind == Similarity::cosine) return matmul_nt(l2_normalize_rows(a), l2_normalize_rows(b));
    return matmul_nt(a, b);
}

/// Sensor-level alignment within one sample: signal node i (after W_m) is
/// matched to knowledge node i against every other knowledge node.
template <typename T>
Var<T> sensor_level_loss(Var<T> signal_nodes, Var<T> knowledge_sensor_part, Var<T> signal_proj, double tau,
                         Similarity kind = Similarity::dot) {
    if (!(tau > 0.0)) throw Error("sensor_level_loss: tau must be positive");
    if (signal_nodes.shape() != knowledge_sensor_part.shape()) {
        detail::shape_error<T>("sensor_level_loss", {signal_nodes.shape(), knowledge_sensor_part.shape()});
    }
    return info_nce_excluding_positive(similarity_matrix(matmul(signal_nodes, signal_proj), knowledge_sensor_part, kind), tau);
}

/// Label-level alignment across a batch: row a of each readout matrix is
/// sample a's concatenated node features.
template <typename T>
Var<T> label_level_loss(Var<T> signal_readouts, Var<T> knowledge_readouts, double tau, Similarity kind = Similarity::dot) {
    if (!(tau > 0.0)) throw Error("label_level_loss: tau must be positive");
    if (signal_readouts.shape() != knowledge_readouts.shape()) {
        detail::shape_error<T>("label_level_loss", {signal_readouts.shape(), knowledge_readouts.shape()});
    }
    if (signal_readouts.value().dim(0) < 2) throw Error("label_level_loss: batch size must be >= 2");
    return info_nce_excluding_positive(similarity_matrix(signal_readouts, knowledge_readouts, kind), tau);
}

/// Knowledge readout g^K: per-node W_r projection flattened to one row.
template <typename T>
Var<T> knowledge_readout(Var<T> knowledge_nodes, Var<T> knowledge_proj) {
    auto projected = matmul(knowledge_nodes, knowledge_proj);
    return reshape(projected, Shape{1, projected.value().numel()});
}

template <typename T>
Var<T> signal_readout(Var<T> signal_nodes) {
    return reshape(signal_nodes, Shape{1, signal_nodes.value().numel()});
}

/// Mean squared difference of two edge matrices, sum_ij (a_ij - b_ij)^2 / n^2.
template <typename T>
Var<T> edge_loss(Var<T> signal_edges, Var<T> knowledge_edges) {
    const auto& a = signal_edges.value();
    if (a.rank() != 2 || a.shape() != knowledge_edges.shape() || a.dim(0) != a.dim(1)) {
        detail::shape_error<T>("edge_loss", {a.shape(), knowledge_edges.shape()});
    }
    return mse(signal_edges, knowledge_edges);
}

template <typename T>
std::vector<Var<T>> reshape_all(std::span<const Var<T>> scalars) {
    std::vector<Var<T>> out;
    for (const auto& s : scalars) out.push_back(reshape(s, Shape{1, 1}));
    return out;
}

/// L = L_D + λ_S Σ_a L_{a,S} + λ_L L_L + λ_E Σ_a L_{a,E}; batch terms are summed,
/// not averaged. Terms with zero weight are not added to the graph.
template <typename T>
Var<T> combined_loss(Var<T> downstream, std::span<const Var<T>> sensor_losses, const Var<T>* label_loss,
                     std::span<const Var<T>> edge_losses, const LossWeights& w) {
    std::vector<Var<T>> terms{downstream};
    if (w.lambda_sensor != 0.0 && !sensor_losses.empty()) {
        terms.push_back(scale(sum(concat(reshape_all(sensor_losses), 0)), static_cast<T>(w.lambda_sensor)));
    }
    if (w.lambda_label != 0.0 && label_loss) terms.push_back(scale(*label_loss, static_cast<T>(w.lambda_label)));
    if (w.lambda_edge != 0.0 && !edge_losses.empty()) {
        terms.push_back(scale(sum(concat(reshape_all(edge_losses), 0)), static_cast<T>(w.lambda_edge)));
    }
    return terms.size() == 1 ? downstream : add_n(std::span<const Var<T>>(terms));
}

}  // namespace klink
