#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "klink/metrics.hpp"
#include "klink/model.hpp"
#include "klink/optim.hpp"

namespace klink {

struct DataPaths {
    std::string train;
    std::string validation;
    std::string test;
};

struct EmbeddingSource {
    std::string table;      // empty: no table
    bool fallback = false;  // deterministic stand-in encoder
    std::uint64_t fallback_seed = 0;
};

struct TrainConfig {
    ModelConfig model;
    LossWeights loss;
    std::size_t epochs = 50;
    std::size_t batch_size = 32;
    std::size_t eval_batch_size = 256;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    int precision = 64;
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::string variant = "full";
    DataPaths data;
    EmbeddingSource embeddings;

    void validate() const {
        model.validate();
        loss.validate();
        if (epochs == 0) throw Error("config: epochs must be >= 1");
        if (batch_size == 0 || eval_batch_size == 0) throw Error("config: batch sizes must be >= 1");
        if (!(learning_rate > 0.0)) throw Error("config: learning_rate must be positive");
        if (precision != 32 && precision != 64) throw Error("config: precision must be 32 or 64");
        if (seeds.empty()) throw Error("config: seeds must not be empty");
    }
};

inline const std::vector<std::string>& ablation_variants() {
    static const std::vector<std::string> v{"full",    "no_knowledge", "no_node", "no_node_sensor",
                                            "no_node_label", "no_edge", "index_prompt"};
    return v;
}

/// Each variant zeroes alignment weights or swaps the prompt template and
/// touches nothing else.
inline TrainConfig apply_variant(TrainConfig c, const std::string& variant) {
    if (variant == "full") {
    } else if (variant == "no_knowledge") {
        c.loss.lambda_sensor = c.loss.lambda_label = c.loss.lambda_edge = 0.0;
    } else if (variant == "no_node") {
        c.loss.lambda_sensor = c.loss.lambda_label = 0.0;
    } else if (variant == "no_node_sensor") {
        c.loss.lambda_sensor = 0.0;
    } else if (variant == "no_node_label") {
        c.loss.lambda_label = 0.0;
    } else if (variant == "no_edge") {
        c.loss.lambda_edge = 0.0;
    } else if (variant == "index_prompt") {
        c.model.prompt_mode = PromptMode::sensor_index;
    } else {
        throw Error("unknown variant '" + variant + "'");
    }
    c.variant = variant;
    return c;
}

inline double& lambda_ref(LossWeights& w, char which) {
    switch (which) {
        case 'S': return w.lambda_sensor;
        case 'L': return w.lambda_label;
        case 'E': return w.lambda_edge;
        default: throw Error(std::string("unknown lambda '") + which + "', expected S, L or E");
    }
}

inline const std::vector<double>& lambda_grid() {
    static const std::vector<double> g{0.0, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1};
    return g;
}

inline std::vector<const MtsSample*> pointers(const std::vector<MtsSample>& samples) {
    std::vector<const MtsSample*> out;
    for (const auto& s : samples) out.push_back(&s);
    return out;
}

inline std::vector<double> labels_of(const std::vector<MtsSample>& samples) {
    std::vector<double> out;
    for (const auto& s : samples) out.push_back(s.label);
    return out;
}

template <typename T>
Metrics evaluate(KLinkModel<T>& model, const std::vector<MtsSample>& samples, std::size_t chunk = 256) {
    if (samples.empty()) throw Error("evaluate: empty split");
    return compute_metrics(model.config.task, model.predict(pointers(samples), chunk), labels_of(samples));
}

struct EpochLog {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    Metrics validation;
    bool improved = false;
};

/// Frozen copy of everything needed to restore a model and its optimizer.
template <typename T>
struct ModelSnapshot {
    std::vector<Tensor<T>> parameters;
    std::vector<BatchNormStats<T>> buffers;
    AdamState<T> optimizer;

    static ModelSnapshot take(KLinkModel<T>& m, const AdamState<T>& opt) {
        ModelSnapshot s;
        for (auto* p : m.parameters()) s.parameters.push_back(p->value);
        for (auto* b : m.buffers()) s.buffers.push_back(*b);
        s.optimizer = opt;
        return s;
    }

    void restore(KLinkModel<T>& m, AdamState<T>& opt) const {
        auto ps = m.parameters();
        for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->value = parameters[i];
        auto bs = m.buffers();
        for (std::size_t i = 0; i < bs.size(); ++i) *bs[i] = buffers[i];
        opt = optimizer;
    }
};

template <typename T>
struct TrainOutcome {
    std::unique_ptr<KLinkModel<T>> model;  // restored to the best validation epoch
    AdamState<T> optimizer;
    std::size_t best_epoch = 0;
    Metrics best_validation;
    std::vector<EpochLog> history;
};

/// One seeded training run: Adam over shuffled mini-batches with the combined
/// objective; the best validation epoch is restored at the end.
template <typename T>
TrainOutcome<T> train(const TrainConfig& config, const DatasetSplit& data, Embedder* embedder,
                      const std::function<void(const EpochLog&)>& on_epoch = {}) {
    config.validate();
    if (data.train.empty()) throw Error("train: empty training split");
    if (data.validation.empty()) throw Error("train: empty validation split");
    if (config.loss.knowledge_active() && !embedder) {
        throw Error("train: alignment weights are non-zero but no embedding table or fallback embedder was given");
    }
    TrainOutcome<T> out;
    out.model = std::make_unique<KLinkModel<T>>(config.model, config.seed);
    auto& model = *out.model;
    out.optimizer.learning_rate = static_cast<T>(config.learning_rate);
    Rng order_rng(stable_hash("batch-order", config.seed));
    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), 0);

    std::optional<ModelSnapshot<T>> best;
    double best_value = -std::numeric_limits<double>::infinity();
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        order_rng.shuffle(order.begin(), order.end());
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            std::vector<const MtsSample*> batch;
            for (std::size_t k = start; k < std::min(order.size(), start + config.batch_size); ++k) batch.push_back(&data.train[order[k]]);
            try {
                for (auto* p : model.parameters()) p->zero_grad();
                Graph<T> g;
                auto fw = model.forward(g, batch, true, config.loss, embedder);
                const double loss = static_cast<double>(fw.total.value().item());
                if (!std::isfinite(loss)) throw Error("loss is " + std::to_string(loss));
                g.backward(fw.total);
                adam_step(out.optimizer, model.parameters());
                loss_sum += loss;
            } catch (const Error& e) {
                throw Error("training diverged at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batches + 1) + ": " + e.what());
            }
            ++batches;
        }
        EpochLog log;
        log.epoch = epoch;
        log.train_loss = loss_sum / static_cast<double>(batches);
        log.validation = evaluate(model, data.validation, config.eval_batch_size);
        if (log.validation.selection_value() > best_value) {
            best_value = log.validation.selection_value();
            best = ModelSnapshot<T>::take(model, out.optimizer);
            out.best_epoch = epoch;
            out.best_validation = log.validation;
            log.improved = true;
        }
        out.history.push_back(log);
        if (on_epoch) on_epoch(log);
    }
    best->restore(model, out.optimizer);
    return out;
}

/// Builds the embedder a config asks for; empty when neither a table nor the
/// fallback is configured.
inline std::unique_ptr<Embedder> make_embedder(const EmbeddingSource& src, std::size_t dim, std::vector<std::string>* warnings = nullptr) {
    if (!src.table.empty()) return std::make_unique<Embedder>(read_embedding_table(src.table, warnings), src.fallback_seed, dim);
    if (src.fallback) return std::make_unique<Embedder>(std::nullopt, src.fallback_seed, dim);
    return nullptr;
}

struct RunRecord {
    std::string variant;
    std::uint64_t seed = 0;
    double lambda = 0.0;
    Metrics test;
    std::size_t best_epoch = 0;
};

/// Trains one configuration once per seed and scores each run on the test split.
template <typename T>
MetricsReport run_seeds(const TrainConfig& config, const DatasetSplit& data, Embedder* embedder,
                        const std::function<void(const RunRecord&)>& on_run = {}) {
    MetricsReport report;
    report.task = config.model.task;
    for (auto seed : config.seeds) {
        TrainConfig c = config;
        c.seed = seed;
        auto outcome = train<T>(c, data, embedder);
        RunRecord rec{config.variant, seed, 0.0, evaluate(*outcome.model, data.test, config.eval_batch_size), outcome.best_epoch};
        report.add(seed, rec.test);
        if (on_run) on_run(rec);
    }
    return report;
}

template <typename T>
std::vector<std::pair<std::string, MetricsReport>> run_ablation(const TrainConfig& config, const DatasetSplit& data, Embedder* embedder,
                                                                const std::vector<std::string>& variants = ablation_variants(),
                                                                const std::function<void(const RunRecord&)>& on_run = {}) {
    std::vector<std::pair<std::string, MetricsReport>> out;
    for (const auto& v : variants) out.emplace_back(v, run_seeds<T>(apply_variant(config, v), data, embedder, on_run));
    return out;
}

/// One report per grid value of the chosen weight; the others stay as configured.
template <typename T>
std::vector<std::pair<double, MetricsReport>> sweep_lambda(const TrainConfig& config, char which, const DatasetSplit& data, Embedder* embedder,
                                                           const std::vector<double>& values = lambda_grid(),
                                                           const std::function<void(const RunRecord&)>& on_run = {}) {
    std::vector<std::pair<double, MetricsReport>> out;
    for (double v : values) {
        TrainConfig c = config;
        lambda_ref(c.loss, which) = v;
        c.variant = std::string("lambda_") + which;
        auto tagged = [&](const RunRecord& r) {
            if (!on_run) return;
            RunRecord copy = r;
            copy.lambda = v;
            on_run(copy);
        };
        out.emplace_back(v, run_seeds<T>(c, data, embedder, tagged));
    }
    return out;
}

/// Mean share of each node's cross-sensor edge mass in the learned E^S that
/// lands on sensors of its own correlation group (evaluation mode).
template <typename T>
double within_group_mass(KLinkModel<T>& model, const std::vector<MtsSample>& samples, const std::vector<std::size_t>& group_of) {
    if (samples.empty()) throw Error("within_group_mass: no samples");
    const std::size_t n = model.config.sensors, lhat = model.config.patches();
    if (group_of.size() != n) throw Error("within_group_mass: group map has " + std::to_string(group_of.size()) + " sensors, model " + std::to_string(n));
    double total = 0.0;
    std::size_t rows = 0;
    for (const auto& s : samples) {
        Graph<T> g;
        auto z = model.node_features(g, {&s}, false);
        const auto& e = construct_graph(z[0], g.param(model.signal.graph_proj), n, lhat).edges.value();
        for (std::size_t r = 0; r < n * lhat; ++r) {
            double same = 0.0, cross = 0.0;
            for (std::size_t c = 0; c < n * lhat; ++c) {
                if (c % n == r % n) continue;
                const double v = static_cast<double>(e.at(r, c));
                cross += v;
                if (group_of[c % n] == group_of[r % n]) same += v;
            }
            total += same / cross;
            ++rows;
        }
    }
    return total / static_cast<double>(rows);
}

/// Multinomial logistic regression on per-sensor means, trained full-batch.
/// Reference point for how much class signal a linear model finds in raw levels.
inline double raw_means_baseline_accuracy(const DatasetSplit& data, std::size_t classes, std::uint64_t seed = 0, std::size_t steps = 500) {
    if (data.train.empty() || data.test.empty()) throw Error("baseline: empty split");
    const std::size_t n = data.train[0].sensors();
    auto features = [&](const std::vector<MtsSample>& samples) {
        Tensor<double> x(Shape{samples.size(), n});
        for (std::size_t k = 0; k < samples.size(); ++k)
            for (std::size_t i = 0; i < n; ++i) {
                double m = 0.0;
                for (std::size_t t = 0; t < samples[k].length(); ++t) m += samples[k].signal.at(i, t);
                x.at(k, i) = m / static_cast<double>(samples[k].length());
            }
        return x;
    };
    auto to_classes = [](const std::vector<MtsSample>& samples) {
        std::vector<std::size_t> y;
        for (const auto& s : samples) y.push_back(static_cast<std::size_t>(std::llround(s.label)));
        return y;
    };
    const auto xtr = features(data.train), xte = features(data.test);
    const auto ytr = to_classes(data.train), yte = to_classes(data.test);
    Rng rng(seed);
    Parameter<double> w("baseline.weight", uniform_tensor<double>(Shape{n, classes}, 0.1, rng));
    Parameter<double> b("baseline.bias", Tensor<double>(Shape{classes}));
    AdamState<double> opt;
    opt.learning_rate = 1e-2;
    for (std::size_t step = 0; step < steps; ++step) {
        w.zero_grad();
        b.zero_grad();
        Graph<double> g;
        auto loss = cross_entropy(add_bias(matmul(g.constant(xtr), g.param(w)), g.param(b)), ytr);
        g.backward(loss);
        adam_step(opt, std::vector<Parameter<double>*>{&w, &b});
    }
    Graph<double> g;
    auto logits = add_bias(matmul(g.constant(xte), g.param(w)), g.param(b)).value();
    return accuracy(argmax_rows(logits), yte);
}

}  // namespace klink
