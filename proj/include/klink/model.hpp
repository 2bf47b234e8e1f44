#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "klink/alignment.hpp"
#include "klink/autograd.hpp"
#include "klink/dataset.hpp"
#include "klink/knowledge_branch.hpp"
#include "klink/random.hpp"
#include "klink/signal_branch.hpp"

namespace klink {

/// Shape and architecture of one model instance.
struct ModelConfig {
    TaskKind task = TaskKind::classification;
    std::size_t sensors = 6;
    std::size_t length = 32;
    std::size_t patch_size = 8;
    std::size_t window = 2;
    SensorEncoderConfig encoder{{1, 8}, 3, 16, {16 * 6 * 2, 3}};
    std::vector<std::string> class_names;
    std::string category_phrase = "state";
    PromptMode prompt_mode = PromptMode::sensor_names;
    std::size_t text_dim = kTextEmbeddingDim;

    std::size_t patches() const { return patch_count(length, patch_size); }
    std::size_t nodes() const { return sensors * patches(); }
    std::size_t pooled_rows() const { return sensors * pooled_patches(patches(), window); }
    std::size_t readout_width() const { return pooled_rows() * encoder.hidden; }
    std::size_t outputs() const { return encoder.head_layers.back(); }

    void validate() const {
        encoder.validate();
        if (sensors < 2) throw Error("model: need at least 2 sensors");
        if (patch_size == 0 || patch_size > length) {
            throw Error("model: patch size " + std::to_string(patch_size) + " must be in [1, " + std::to_string(length) + "]");
        }
        (void)encoded_length(patch_size, encoder);
        if (window == 0 || window > patches()) {
            throw Error("model: window " + std::to_string(window) + " must be in [1, " + std::to_string(patches()) + "]");
        }
        if (encoder.head_layers.front() != readout_width()) {
            throw Error("model: head input width " + std::to_string(encoder.head_layers.front()) + " != readout width " +
                        std::to_string(readout_width()) + " (" + std::to_string(pooled_rows()) + " rows x " +
                        std::to_string(encoder.hidden) + ")");
        }
        if (task == TaskKind::regression && outputs() != 1) throw Error("model: regression head must end in width 1");
        if (task == TaskKind::classification) {
            if (outputs() < 2) throw Error("model: classification head needs >= 2 outputs");
            if (!class_names.empty() && class_names.size() != outputs()) {
                throw Error("model: " + std::to_string(class_names.size()) + " class names for " + std::to_string(outputs()) + " outputs");
            }
        }
    }
};

/// Presets reproducing the published structure table.
inline ModelConfig preset_config(const std::string& name) {
    ModelConfig c;
    if (name == "fd002" || name == "fd004") {
        c.task = TaskKind::regression;
        c.sensors = 14;
        c.length = 50;
        c.patch_size = 5;
        c.window = 2;
        c.category_phrase = "remaining useful life of a machine";
        c.encoder = name == "fd002" ? SensorEncoderConfig{{1, 64, 48}, 2, 56, {56 * 14 * 5, 112, 112, 56, 1}}
                                    : SensorEncoderConfig{{1, 56, 16}, 2, 36, {36 * 14 * 5, 112, 112, 56, 1}};
    } else if (name == "uci_har") {
        c.task = TaskKind::classification;
        c.sensors = 9;
        c.length = 128;
        c.patch_size = 64;
        c.window = 2;
        c.category_phrase = "human activity";
        c.class_names = {"walking", "walking upstairs", "walking downstairs", "sitting", "standing", "lying"};
        c.encoder = {{1, 48, 96, 18}, 6, 16, {16 * 9 * 1, 6}};
    } else if (name == "isruc") {
        c.task = TaskKind::classification;
        c.sensors = 10;
        c.length = 300;
        c.patch_size = 75;
        c.window = 2;
        c.category_phrase = "sleep stage";
        c.class_names = {"wakefulness", "N1 stage", "N2 stage", "N3 stage", "REM"};
        c.encoder = {{1, 64, 128, 64}, 5, 72, {72 * 10 * 2, 144, 144, 72, 5}};
    } else if (name == "synthetic") {
        c.class_names = {"state 0", "state 1", "state 2"};
    } else {
        throw Error("unknown preset '" + name + "'");
    }
    return c;
}

/// All per-batch graph outputs of one forward pass.
template <typename T>
struct BatchForward {
    Var<T> output;  // [B, outputs]
    Var<T> downstream;
    Var<T> total;
    std::vector<Var<T>> sensor_losses;
    std::vector<Var<T>> edge_losses;
    std::optional<Var<T>> label_loss;
    std::vector<SpatioTemporalGraph<T>> signal_graphs;
    std::vector<KnowledgeGraph<T>> knowledge_graphs;
};

/// Both branches plus the alignment projections. Each component draws its
/// initial weights from its own stream of the seed, so the signal branch
/// initializes identically whether or not the knowledge branch is used.
template <typename T>
class KLinkModel {
   public:
    ModelConfig config;

   private:
    Rng signal_rng_, knowledge_rng_, align_rng_;

   public:
    SignalBranch<T> signal;
    MappingHeads<T> heads;
    AlignmentProjection<T> align;

    KLinkModel(const ModelConfig& cfg, std::uint64_t seed)
        : config((cfg.validate(), cfg)),
          signal_rng_(stream(seed, "signal")),
          knowledge_rng_(stream(seed, "knowledge")),
          align_rng_(stream(seed, "alignment")),
          signal(cfg.encoder, cfg.patch_size, signal_rng_),
          heads(cfg.text_dim, cfg.encoder.hidden, knowledge_rng_),
          align(cfg.encoder.hidden, align_rng_) {}

    KLinkModel(const KLinkModel&) = delete;
    KLinkModel& operator=(const KLinkModel&) = delete;

    std::vector<Parameter<T>*> parameters() {
        auto out = signal.parameters();
        for (auto* p : heads.parameters()) out.push_back(p);
        for (auto* p : align.parameters()) out.push_back(p);
        return out;
    }

    std::vector<BatchNormStats<T>*> buffers() {
        std::vector<BatchNormStats<T>*> out;
        for (auto& b : signal.blocks) out.push_back(&b.stats);
        return out;
    }

    /// Signal-only node features Z^S (with positional encoding) per sample.
    std::vector<Var<T>> node_features(Graph<T>& g, const std::vector<const MtsSample*>& batch, bool training) {
        std::vector<std::vector<Tensor<double>>> patch_sets;
        for (const auto* s : batch) {
            if (s->sensors() != config.sensors || s->length() != config.length) {
                throw Error("model: sample " + s->sample_id + " has shape " + shape_str(s->signal.shape()) + ", model expects [" +
                            std::to_string(config.sensors) + "," + std::to_string(config.length) + "]");
            }
            patch_sets.push_back(partition(*s, config.patch_size).patches);
        }
        auto z = encode_sensors(g, signal, patch_sets, training);
        for (auto& zb : z) zb = add_positional_encoding(zb, config.patches(), config.sensors);
        return z;
    }

    /// Full forward pass. The knowledge branch runs only when an embedder is
    /// given and at least one alignment weight is non-zero.
    BatchForward<T> forward(Graph<T>& g, const std::vector<const MtsSample*>& batch, bool training, const LossWeights& weights,
                            Embedder* embedder) {
        weights.validate();
        BatchForward<T> out;
        auto z = node_features(g, batch, training);
        std::vector<Var<T>> pooled;
        for (auto& zb : z) {
            out.signal_graphs.push_back(construct_graph(zb, g.param(signal.graph_proj), config.sensors, config.patches()));
            pooled.push_back(mpnn_forward(g, out.signal_graphs.back(), WindowSpec{config.window}, signal.update));
        }
        out.output = readout_and_head(g, std::span<const Var<T>>(pooled), signal.head);
        out.downstream = downstream_loss(g, out.output, batch);

        if (embedder && weights.knowledge_active()) {
            std::vector<Var<T>> signal_rows, knowledge_rows;
            for (std::size_t b = 0; b < batch.size(); ++b) {
                const auto& s = *batch[b];
                auto prompts = build_prompts(s.sensor_names, config.patches(), config.category_phrase,
                                             render_label(s.label, config.task, config.class_names), config.prompt_mode);
                auto [sensor_emb, label_emb] = embed_prompts<T>(prompts, *embedder);
                auto kg = build_knowledge_graph(g, sensor_emb, label_emb, heads);
                if (weights.lambda_sensor != 0.0) {
                    out.sensor_losses.push_back(sensor_level_loss(z[b], kg.sensor_part, g.param(align.signal), weights.tau, weights.similarity));
                }
                if (weights.lambda_edge != 0.0) out.edge_losses.push_back(edge_loss(out.signal_graphs[b].edges, kg.edges));
                if (weights.lambda_label != 0.0) {
                    signal_rows.push_back(signal_readout(z[b]));
                    knowledge_rows.push_back(knowledge_readout(kg.nodes, g.param(align.knowledge)));
                }
                out.knowledge_graphs.push_back(kg);
            }
            if (weights.lambda_label != 0.0 && batch.size() >= 2) {
                out.label_loss = label_level_loss(concat(signal_rows, 0), concat(knowledge_rows, 0), weights.tau, weights.similarity);
            }
        }
        out.total = combined_loss(out.downstream, std::span<const Var<T>>(out.sensor_losses), out.label_loss ? &*out.label_loss : nullptr,
                                  std::span<const Var<T>>(out.edge_losses), weights);
        return out;
    }

    /// Evaluation-mode predictions from the signal branch alone: one value per
    /// sample for regression, the class logits row for classification.
    Tensor<double> predict(const std::vector<const MtsSample*>& samples, std::size_t chunk = 256) {
        if (samples.empty()) throw Error("predict: no samples");
        Tensor<double> out(Shape{samples.size(), config.outputs()});
        LossWeights signal_only;
        signal_only.lambda_sensor = signal_only.lambda_label = signal_only.lambda_edge = 0.0;
        for (std::size_t start = 0; start < samples.size(); start += chunk) {
            const std::size_t stop = std::min(samples.size(), start + chunk);
            std::vector<const MtsSample*> part(samples.begin() + static_cast<std::ptrdiff_t>(start),
                                               samples.begin() + static_cast<std::ptrdiff_t>(stop));
            Graph<T> g;
            auto z = node_features(g, part, false);
            std::vector<Var<T>> pooled;
            for (auto& zb : z) {
                auto sg = construct_graph(zb, g.param(signal.graph_proj), config.sensors, config.patches());
                pooled.push_back(mpnn_forward(g, sg, WindowSpec{config.window}, signal.update));
            }
            const auto& y = readout_and_head(g, std::span<const Var<T>>(pooled), signal.head).value();
            for (std::size_t r = 0; r < y.dim(0); ++r)
                for (std::size_t c = 0; c < y.dim(1); ++c) out.at(start + r, c) = static_cast<double>(y.at(r, c));
        }
        return out;
    }

   private:
    static Rng stream(std::uint64_t seed, const char* component) { return Rng(stable_hash(component, seed)); }

    Var<T> downstream_loss(Graph<T>& g, Var<T> output, const std::vector<const MtsSample*>& batch) {
        if (config.task == TaskKind::regression) {
            Tensor<T> target(Shape{batch.size(), 1});
            for (std::size_t b = 0; b < batch.size(); ++b) target[b] = static_cast<T>(batch[b]->label);
            return mse(output, g.constant(std::move(target), "targets"));
        }
        std::vector<std::size_t> labels;
        for (const auto* s : batch) {
            const auto idx = static_cast<long long>(std::llround(s->label));
            if (idx < 0 || static_cast<std::size_t>(idx) >= config.outputs()) {
                throw Error("model: label " + std::to_string(idx) + " of sample " + s->sample_id + " outside [0, " +
                            std::to_string(config.outputs()) + ")");
            }
            labels.push_back(static_cast<std::size_t>(idx));
        }
        return cross_entropy(output, labels);
    }
};

}  // namespace klink
