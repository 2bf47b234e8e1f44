#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "klink/autograd.hpp"
#include "klink/layers.hpp"
#include "klink/random.hpp"

namespace klink {

/// CNN sensor encoder and downstream head widths.
struct SensorEncoderConfig {
    std::vector<std::size_t> block_channels{1, 64, 48};
    std::size_t kernel = 2;
    std::size_t hidden = 56;
    std::vector<std::size_t> head_layers{56 * 14 * 5, 112, 112, 56, 1};

    void validate() const {
        if (block_channels.size() < 2) throw Error("encoder: need at least one block (two channel counts)");
        if (block_channels.front() != 1) throw Error("encoder: first channel count must be 1 (sensors are encoded separately)");
        for (auto c : block_channels)
            if (c == 0) throw Error("encoder: channel counts must be positive");
        if (kernel == 0 || hidden == 0) throw Error("encoder: kernel and hidden width must be positive");
        if (head_layers.size() < 2) throw Error("encoder: head needs an input and an output width");
        for (auto w : head_layers)
            if (w == 0) throw Error("encoder: head widths must be positive");
    }

    std::size_t blocks() const { return block_channels.size() - 1; }
};

/// Length after all conv/pool blocks. Each block halves the length (floor);
/// a block whose pooling would reach zero is rejected.
inline std::size_t encoded_length(std::size_t patch_size, const SensorEncoderConfig& cfg) {
    std::size_t len = patch_size;
    for (std::size_t b = 0; b < cfg.blocks(); ++b) {
        len /= 2;
        if (len == 0) {
            throw Error("encoder: patch size " + std::to_string(patch_size) + " pools to length 0 in block " + std::to_string(b));
        }
    }
    return len;
}

/// Sinusoidal encoding of patch index t (0-based): column 2k holds
/// sin(t / 10000^(2k/d)), column 2k+1 the matching cos.
inline Tensor<double> positional_encoding(std::size_t patches, std::size_t dim) {
    Tensor<double> pe(Shape{patches, dim});
    for (std::size_t t = 0; t < patches; ++t)
        for (std::size_t j = 0; j < dim; ++j) {
            const double k2 = static_cast<double>(j - j % 2);
            const double angle = static_cast<double>(t) / std::pow(10000.0, k2 / static_cast<double>(dim));
            pe.at(t, j) = j % 2 == 0 ? std::sin(angle) : std::cos(angle);
        }
    return pe;
}

template <typename T>
struct ConvBlock {
    Parameter<T> weight;
    Parameter<T> gamma;
    Parameter<T> beta;
    BatchNormStats<T> stats;
};

template <typename T>
struct DenseLayer {
    Parameter<T> weight;  // [in, out]
    Parameter<T> bias;    // [out]
};

template <typename T>
DenseLayer<T> make_dense(const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    return {Parameter<T>(name + ".weight", uniform_tensor<T>(Shape{in, out}, bound, rng)),
            Parameter<T>(name + ".bias", uniform_tensor<T>(Shape{out}, bound, rng))};
}

template <typename T>
Var<T> dense(Graph<T>& g, DenseLayer<T>& layer, Var<T> x) {
    return add_bias(matmul(x, g.param(layer.weight)), g.param(layer.bias));
}

/// Trainable state of the signal branch: CNN encoder, graph projection W_s,
/// MPNN update W_g and the downstream head f_l.
template <typename T>
struct SignalBranch {
    SensorEncoderConfig config;
    std::size_t patch_size = 0;
    std::vector<ConvBlock<T>> blocks;
    DenseLayer<T> encoder_out;
    Parameter<T> graph_proj;  // W_s
    DenseLayer<T> update;     // W_g
    std::vector<DenseLayer<T>> head;

    SignalBranch(const SensorEncoderConfig& cfg, std::size_t patch, Rng& rng) : config(cfg), patch_size(patch) {
        cfg.validate();
        const std::size_t final_len = encoded_length(patch, cfg);
        for (std::size_t b = 0; b < cfg.blocks(); ++b) {
            const std::size_t cin = cfg.block_channels[b], cout = cfg.block_channels[b + 1];
            const double bound = 1.0 / std::sqrt(static_cast<double>(cin * cfg.kernel));
            const std::string name = "signal.block" + std::to_string(b);
            blocks.push_back({Parameter<T>(name + ".conv", uniform_tensor<T>(Shape{cout, cin, cfg.kernel}, bound, rng)),
                              Parameter<T>(name + ".bn_gamma", Tensor<T>(Shape{cout}, T(1))),
                              Parameter<T>(name + ".bn_beta", Tensor<T>(Shape{cout}, T(0))), BatchNormStats<T>(cout)});
        }
        encoder_out = make_dense<T>("signal.encoder_out", cfg.block_channels.back() * final_len, cfg.hidden, rng);
        const double hb = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
        graph_proj = Parameter<T>("signal.graph_proj", uniform_tensor<T>(Shape{cfg.hidden, cfg.hidden}, hb, rng));
        update = make_dense<T>("signal.update", cfg.hidden, cfg.hidden, rng);
        for (std::size_t k = 0; k + 1 < cfg.head_layers.size(); ++k) {
            head.push_back(make_dense<T>("signal.head" + std::to_string(k), cfg.head_layers[k], cfg.head_layers[k + 1], rng));
        }
    }

    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        for (auto& b : blocks) out.insert(out.end(), {&b.weight, &b.gamma, &b.beta});
        out.insert(out.end(), {&encoder_out.weight, &encoder_out.bias, &graph_proj, &update.weight, &update.bias});
        for (auto& h : head) out.insert(out.end(), {&h.weight, &h.bias});
        return out;
    }
};

/// Encodes every (sensor, patch) slice independently with shared weights.
/// slices is [count, 1, f]; returns [count, d_h]. Each block is
/// conv1d -> batchnorm1d -> maxpool(2,2) -> relu, then an affine map to d_h.
template <typename T>
Var<T> encode_slices(Graph<T>& g, SignalBranch<T>& sb, Var<T> slices, bool training) {
    const auto& s = slices.value();
    if (s.rank() != 3 || s.dim(1) != 1 || s.dim(2) != sb.patch_size) {
        throw Error("encode_sensors: expected slices [count,1," + std::to_string(sb.patch_size) + "], got " + shape_str(s.shape()));
    }
    Var<T> x = slices;
    for (auto& b : sb.blocks) {
        x = conv1d(x, g.param(b.weight));
        x = batchnorm1d(x, g.param(b.gamma), g.param(b.beta), b.stats, training);
        x = maxpool1d(x);
        x = relu(x);
    }
    const auto& xs = x.value().shape();
    x = reshape(x, Shape{xs[0], xs[1] * xs[2]});
    return dense(g, sb.encoder_out, x);
}

/// Node features Z^S for a batch of samples' patches. Rows of each sample
/// follow node order t*N + i (patch-major, sensor-minor).
template <typename T>
std::vector<Var<T>> encode_sensors(Graph<T>& g, SignalBranch<T>& sb, const std::vector<std::vector<Tensor<double>>>& patch_sets,
                                   bool training) {
    if (patch_sets.empty()) throw Error("encode_sensors: empty batch");
    const std::size_t lhat = patch_sets[0].size();
    const std::size_t n = patch_sets[0].at(0).dim(0);
    const std::size_t f = sb.patch_size;
    const std::size_t per_sample = n * lhat;
    Tensor<T> slices(Shape{patch_sets.size() * per_sample, 1, f});
    for (std::size_t b = 0; b < patch_sets.size(); ++b) {
        if (patch_sets[b].size() != lhat) throw Error("encode_sensors: inconsistent patch counts in batch");
        for (std::size_t t = 0; t < lhat; ++t) {
            const auto& p = patch_sets[b][t];
            if (p.dim(0) != n || p.dim(1) != f) throw Error("encode_sensors: patch shape " + shape_str(p.shape()));
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t k = 0; k < f; ++k) slices.at(b * per_sample + t * n + i, 0, k) = static_cast<T>(p.at(i, k));
        }
    }
    auto z = encode_slices(g, sb, g.constant(std::move(slices), "patch_slices"), training);
    std::vector<Var<T>> out;
    for (std::size_t b = 0; b < patch_sets.size(); ++b) out.push_back(slice_rows(z, b * per_sample, per_sample));
    return out;
}

/// Adds the encoding of patch t to every node of that patch.
template <typename T>
Var<T> add_positional_encoding(Var<T> z, std::size_t patches, std::size_t sensors) {
    const auto& zs = z.value();
    if (zs.rank() != 2 || zs.dim(0) != patches * sensors) {
        throw Error("add_positional_encoding: expected " + std::to_string(patches * sensors) + " node rows, got " + shape_str(zs.shape()));
    }
    const auto pe = positional_encoding(patches, zs.dim(1));
    Tensor<T> offset(zs.shape());
    for (std::size_t t = 0; t < patches; ++t)
        for (std::size_t i = 0; i < sensors; ++i)
            for (std::size_t j = 0; j < zs.dim(1); ++j) offset.at(t * sensors + i, j) = static_cast<T>(pe.at(t, j));
    return add(z, z.graph->constant(std::move(offset), "positional_encoding"));
}

/// Fully-connected spatio-temporal graph over N*L̂ nodes.
template <typename T>
struct SpatioTemporalGraph {
    Var<T> nodes;   // Z^S, [N*L̂, d_h]
    Var<T> logits;  // dot products of projected features
    Var<T> edges;   // E^S, row-softmax of logits
    std::size_t sensors = 0;
    std::size_t patches = 0;
};

/// e_ij = softmax_j( (z_i W_s) . (z_j W_s) ).
template <typename T>
SpatioTemporalGraph<T> construct_graph(Var<T> z, Var<T> graph_proj, std::size_t sensors, std::size_t patches) {
    auto projected = matmul(z, graph_proj);
    auto logits = matmul_nt(projected, projected);
    return {z, logits, softmax_rows(logits), sensors, patches};
}

/// Moving window of M consecutive patches, stride one patch.
struct WindowSpec {
    std::size_t size = 2;
};

/// Message passing over every window m = 0..L̂-M. Inside a window the edge
/// rows are renormalized over the window's M*N nodes (softmax of the
/// restricted logits), neighbors are aggregated h_i = sum_j e_ij z_j, and the
/// shared update relu(h W_g + b_g) is applied. A node covered by several
/// windows takes the mean of its per-window updates. Returns [N*L̂, d_h].
template <typename T>
Var<T> mpnn_propagate(Graph<T>& g, const SpatioTemporalGraph<T>& sg, WindowSpec window, DenseLayer<T>& update) {
    const std::size_t n = sg.sensors, lhat = sg.patches, m_size = window.size;
    if (m_size == 0 || m_size > lhat) {
        throw Error("mpnn: window size " + std::to_string(m_size) + " must be in [1, " + std::to_string(lhat) + "]");
    }
    const std::size_t windows = lhat - m_size + 1;
    const std::size_t w_nodes = m_size * n;
    std::vector<Var<T>> updated;
    for (std::size_t m = 0; m < windows; ++m) {
        const std::size_t r0 = m * n;
        auto edges = softmax_rows(slice(sg.logits, r0, w_nodes, r0, w_nodes));
        auto h = matmul(edges, slice_rows(sg.nodes, r0, w_nodes));
        updated.push_back(relu(dense(g, update, h)));
    }
    std::vector<Var<T>> per_patch;
    for (std::size_t t = 0; t < lhat; ++t) {
        const std::size_t first = t + 1 >= m_size ? t + 1 - m_size : 0;
        const std::size_t last = std::min(t, windows - 1);
        std::vector<Var<T>> parts;
        for (std::size_t m = first; m <= last; ++m) parts.push_back(slice_rows(updated[m], (t - m) * n, n));
        per_patch.push_back(parts.size() == 1 ? parts[0] : mean_n(std::span<const Var<T>>(parts)));
    }
    return concat(std::span<const Var<T>>(per_patch), 0);
}

/// Number of temporal rows per sensor after pooling.
inline std::size_t pooled_patches(std::size_t patches, std::size_t window) { return patches / window; }

/// Mean-pools consecutive, non-overlapping groups of M patches; row p*N + i
/// is sensor i averaged over patches [p*M, (p+1)*M). Trailing patches that do
/// not fill a group are dropped.
template <typename T>
Var<T> temporal_pool(Var<T> h, std::size_t sensors, std::size_t patches, WindowSpec window) {
    const std::size_t groups = pooled_patches(patches, window.size);
    if (groups == 0) throw Error("temporal_pool: window larger than patch count");
    std::vector<Var<T>> rows;
    for (std::size_t p = 0; p < groups; ++p) {
        std::vector<Var<T>> parts;
        for (std::size_t k = 0; k < window.size; ++k) parts.push_back(slice_rows(h, (p * window.size + k) * sensors, sensors));
        rows.push_back(parts.size() == 1 ? parts[0] : mean_n(std::span<const Var<T>>(parts)));
    }
    return concat(std::span<const Var<T>>(rows), 0);
}

template <typename T>
Var<T> mpnn_forward(Graph<T>& g, const SpatioTemporalGraph<T>& sg, WindowSpec window, DenseLayer<T>& update) {
    return temporal_pool(mpnn_propagate(g, sg, window, update), sg.sensors, sg.patches, window);
}

/// Concatenates each sample's node rows (node order) into one readout row and
/// maps the [B, width] batch through the head: relu between layers, none after
/// the last.
template <typename T>
Var<T> readout_and_head(Graph<T>& g, std::span<const Var<T>> node_features, std::vector<DenseLayer<T>>& head) {
    if (node_features.empty()) throw Error("readout: empty batch");
    std::vector<Var<T>> rows;
    for (const auto& z : node_features) rows.push_back(reshape(z, Shape{1, z.value().numel()}));
    auto x = concat(std::span<const Var<T>>(rows), 0);
    const std::size_t width = x.value().dim(1);
    if (head.empty() || head.front().weight.value.dim(0) != width) {
        throw Error("readout: head input width " + std::to_string(head.empty() ? 0 : head.front().weight.value.dim(0)) +
                    " does not match concatenated feature length " + std::to_string(width));
    }
    for (std::size_t k = 0; k < head.size(); ++k) {
        x = dense(g, head[k], x);
        if (k + 1 < head.size()) x = relu(x);
    }
    return x;
}

}  // namespace klink
