#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <iomanip>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "klink/autograd.hpp"
#include "klink/dataset.hpp"
#include "klink/random.hpp"
#include "klink/signal_branch.hpp"

namespace klink {

inline constexpr std::size_t kTextEmbeddingDim = 512;

enum class PromptMode {
    sensor_names,  // "A sensor of temperature 1 at the 3 timestamp"
    sensor_index,  // "A sensor of 1 at the 3 timestamp"
};

struct PromptSet {
    std::vector<std::vector<std::string>> sensor_prompts;  // [patch][sensor]
    std::string label_prompt;
    std::string category_phrase;

    std::size_t patches() const { return sensor_prompts.size(); }
    std::size_t sensors() const { return sensor_prompts.empty() ? 0 : sensor_prompts[0].size(); }
};

inline std::string sensor_prompt(const std::string& sensor, std::size_t timestamp) {
    return "A sensor of " + sensor + " at the " + std::to_string(timestamp) + " timestamp";
}

inline std::string label_prompt(const std::string& category, const std::string& label) {
    return "The " + category + " is " + label;
}

/// Classification labels render as class names, regression labels as the
/// rounded integer value.
inline std::string render_label(double label, TaskKind task, const std::vector<std::string>& class_names) {
    if (task == TaskKind::classification) {
        const auto idx = static_cast<std::size_t>(std::llround(label));
        if (idx >= class_names.size()) throw Error("render_label: class index " + std::to_string(idx) + " has no name");
        return class_names[idx];
    }
    return std::to_string(std::llround(label));
}

/// Timestamps are 1-based patch indices; index mode substitutes the 1-based
/// sensor index for the name.
inline PromptSet build_prompts(const std::vector<std::string>& sensor_names, std::size_t patches, const std::string& category_phrase,
                               const std::string& label_text, PromptMode mode = PromptMode::sensor_names) {
    if (sensor_names.empty()) throw Error("build_prompts: no sensors");
    for (std::size_t i = 0; i < sensor_names.size(); ++i)
        if (sensor_names[i].empty()) throw Error("build_prompts: sensor " + std::to_string(i) + " has an empty name");
    PromptSet ps;
    ps.category_phrase = category_phrase;
    ps.label_prompt = label_prompt(category_phrase, label_text);
    for (std::size_t t = 0; t < patches; ++t) {
        std::vector<std::string> row;
        for (std::size_t i = 0; i < sensor_names.size(); ++i) {
            const std::string s = mode == PromptMode::sensor_index ? std::to_string(i + 1) : sensor_names[i];
            row.push_back(sensor_prompt(s, t + 1));
        }
        ps.sensor_prompts.push_back(std::move(row));
    }
    return ps;
}

// ---------------------------------------------------------------------------
// Embedding table

struct EmbeddingTable {
    std::string encoder_id;
    std::size_t dim = kTextEmbeddingDim;
    std::unordered_map<std::string, std::vector<double>> entries;

    const std::vector<double>* find(const std::string& prompt) const {
        auto it = entries.find(prompt);
        return it == entries.end() ? nullptr : &it->second;
    }
};

/// Line-delimited table: a header {"dim":..,"encoder":..} then one
/// {"prompt":..,"vec":[..]} per line. Duplicate prompts keep the last vector
/// and add a warning.
inline EmbeddingTable read_embedding_table(std::istream& in, std::vector<std::string>* warnings = nullptr) {
    EmbeddingTable table;
    std::string line;
    std::size_t line_no = 0;
    bool header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw Error("embedding table: line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!header) {
            if (!j.contains("dim")) throw Error("embedding table: header line lacks \"dim\"");
            table.dim = j.at("dim").get<std::size_t>();
            table.encoder_id = j.value("encoder", std::string{});
            header = true;
            continue;
        }
        if (!j.contains("prompt") || !j.contains("vec")) {
            throw Error("embedding table: line " + std::to_string(line_no) + " needs \"prompt\" and \"vec\"");
        }
        auto prompt = j.at("prompt").get<std::string>();
        auto vec = j.at("vec").get<std::vector<double>>();
        if (vec.size() != table.dim) {
            throw Error("embedding table: line " + std::to_string(line_no) + " has " + std::to_string(vec.size()) + " values, header dim " +
                        std::to_string(table.dim));
        }
        if (table.entries.count(prompt) && warnings) warnings->push_back("duplicate prompt, last wins: " + prompt);
        table.entries[prompt] = std::move(vec);
    }
    if (!header) throw Error("embedding table: missing header line");
    return table;
}

inline EmbeddingTable read_embedding_table(const std::string& path, std::vector<std::string>* warnings = nullptr) {
    std::ifstream in(path);
    if (!in) throw Error("embedding table: cannot open " + path);
    return read_embedding_table(in, warnings);
}

inline void write_embedding_table(std::ostream& out, const EmbeddingTable& table, const std::vector<std::string>& order) {
    out << nlohmann::json{{"dim", table.dim}, {"encoder", table.encoder_id}}.dump() << '\n';
    for (const auto& p : order) {
        const auto* v = table.find(p);
        if (!v) throw Error("write_embedding_table: no vector for prompt " + p);
        out << nlohmann::json{{"prompt", p}, {"vec", *v}}.dump() << '\n';
    }
}

/// Deterministic stand-in for a text encoder: dim standard normals from a
/// counter-based stream keyed by (seed, prompt), scaled to unit length.
inline std::vector<double> fallback_embedding(const std::string& prompt, std::uint64_t seed, std::size_t dim = kTextEmbeddingDim) {
    CounterNormal stream(stable_hash(prompt, seed));
    std::vector<double> v(dim);
    double norm = 0.0;
    for (std::size_t k = 0; k < dim; ++k) {
        v[k] = stream(k);
        norm += v[k] * v[k];
    }
    norm = std::sqrt(norm);
    for (auto& x : v) x /= norm;
    return v;
}

/// Exact-match lookup with deterministic fallback on a miss.
inline std::vector<double> embed(const std::string& prompt, const EmbeddingTable* table, std::uint64_t fallback_seed,
                                 std::size_t dim = kTextEmbeddingDim) {
    if (table) {
        if (table->dim != dim) {
            throw Error("embed: table dim " + std::to_string(table->dim) + " does not match mapping head input " + std::to_string(dim));
        }
        if (const auto* v = table->find(prompt)) return *v;
    }
    return fallback_embedding(prompt, fallback_seed, dim);
}

/// Prompt-to-vector source shared by training: an optional table plus the
/// fallback, with a memo so each prompt is embedded once.
class Embedder {
   public:
    Embedder(std::optional<EmbeddingTable> table, std::uint64_t fallback_seed, std::size_t dim = kTextEmbeddingDim)
        : table_(std::move(table)), seed_(fallback_seed), dim_(dim) {
        if (table_ && table_->dim != dim_) {
            throw Error("embedder: table dim " + std::to_string(table_->dim) + " does not match mapping head input " + std::to_string(dim_));
        }
    }

    const std::vector<double>& operator()(const std::string& prompt) {
        auto it = cache_.find(prompt);
        if (it != cache_.end()) return it->second;
        if (table_ && !table_->find(prompt)) ++misses_;
        return cache_.emplace(prompt, embed(prompt, table_ ? &*table_ : nullptr, seed_, dim_)).first->second;
    }

    std::size_t dim() const { return dim_; }
    std::size_t table_misses() const { return misses_; }
    bool has_table() const { return table_.has_value(); }

   private:
    std::optional<EmbeddingTable> table_;
    std::uint64_t seed_;
    std::size_t dim_;
    std::size_t misses_ = 0;
    std::unordered_map<std::string, std::vector<double>> cache_;
};

/// Table whose sensor prompts encode a known relation structure: each vector
/// mixes a shared per-group direction, a per-sensor direction and a
/// per-timestamp direction, so sensors in one group embed close together.
/// Label prompts get one random direction per class.
inline EmbeddingTable grouped_embedding_table(const std::vector<std::string>& sensor_names, const std::vector<std::size_t>& group_of,
                                              std::size_t patches, const std::string& category_phrase,
                                              const std::vector<std::string>& class_names, std::uint64_t seed,
                                              std::size_t dim = kTextEmbeddingDim, double group_weight = 1.0,
                                              double sensor_weight = 0.3, double time_weight = 0.3) {
    if (group_of.size() != sensor_names.size()) throw Error("grouped_embedding_table: one group index per sensor required");
    auto direction = [&](const std::string& key) { return fallback_embedding(key, seed, dim); };
    EmbeddingTable table;
    table.encoder_id = "grouped-synthetic";
    table.dim = dim;
    for (std::size_t t = 0; t < patches; ++t) {
        const auto time = direction("time " + std::to_string(t));
        for (std::size_t i = 0; i < sensor_names.size(); ++i) {
            const auto group = direction("group " + std::to_string(group_of[i]));
            const auto own = direction("sensor " + sensor_names[i]);
            std::vector<double> v(dim);
            double norm = 0.0;
            for (std::size_t k = 0; k < dim; ++k) {
                v[k] = group_weight * group[k] + sensor_weight * own[k] + time_weight * time[k];
                norm += v[k] * v[k];
            }
            norm = std::sqrt(norm);
            for (auto& x : v) x /= norm;
            table.entries[sensor_prompt(sensor_names[i], t + 1)] = std::move(v);
        }
    }
    for (const auto& c : class_names) table.entries[label_prompt(category_phrase, c)] = direction("label " + c);
    return table;
}

// ---------------------------------------------------------------------------
// Knowledge-link graph

/// Two bias-free maps from text-embedding space to d_h.
template <typename T>
struct MappingHeads {
    Parameter<T> sensor;  // [512, d_h]
    Parameter<T> label;   // [512, d_h]

    MappingHeads() = default;
    MappingHeads(std::size_t text_dim, std::size_t hidden, Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(text_dim));
        sensor = Parameter<T>("knowledge.map_sensor", uniform_tensor<T>(Shape{text_dim, hidden}, bound, rng));
        label = Parameter<T>("knowledge.map_label", uniform_tensor<T>(Shape{text_dim, hidden}, bound, rng));
    }

    std::vector<Parameter<T>*> parameters() { return {&sensor, &label}; }
};

template <typename T>
struct KnowledgeGraph {
    Var<T> sensor_part;  // [N*L̂, d_h]
    Var<T> label_part;   // [1, d_h]
    Var<T> nodes;        // Z^K = [sensor_part | label_part], [N*L̂, 2 d_h]
    Var<T> logits;       // Z^K Z^K^T, symmetric
    Var<T> edges;        // E^K, row-softmax of logits
};

/// Embeds a prompt set into frozen [N*L̂, dim] and [1, dim] tensors (node order t*N + i).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> embed_prompts(const PromptSet& prompts, Embedder& embedder) {
    const std::size_t n = prompts.sensors(), lhat = prompts.patches(), d = embedder.dim();
    Tensor<T> sensors(Shape{n * lhat, d});
    for (std::size_t t = 0; t < lhat; ++t)
        for (std::size_t i = 0; i < n; ++i) {
            const auto& v = embedder(prompts.sensor_prompts[t][i]);
            for (std::size_t k = 0; k < d; ++k) sensors.at(t * n + i, k) = static_cast<T>(v[k]);
        }
    Tensor<T> label(Shape{1, d});
    const auto& v = embedder(prompts.label_prompt);
    for (std::size_t k = 0; k < d; ++k) label.at(0, k) = static_cast<T>(v[k]);
    return {std::move(sensors), std::move(label)};
}

template <typename T>
KnowledgeGraph<T> build_knowledge_graph(Graph<T>& g, const Tensor<T>& sensor_embeddings, const Tensor<T>& label_embedding,
                                        MappingHeads<T>& heads) {
    auto sensor_part = matmul(g.constant(sensor_embeddings, "sensor_prompt_embeddings"), g.param(heads.sensor));
    auto label_part = matmul(g.constant(label_embedding, "label_prompt_embedding"), g.param(heads.label));
    const std::size_t nodes = sensor_embeddings.dim(0);
    auto z = concat({sensor_part, broadcast_rows(label_part, nodes)}, 1);
    auto logits = matmul_nt(z, z);
    return {sensor_part, label_part, z, logits, softmax_rows(logits)};
}

}  // namespace klink
