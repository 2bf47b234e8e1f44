#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "klink/training.hpp"

namespace klink {

using nlohmann::json;

namespace detail {

inline void reject_unknown(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw Error("config: '" + where + "' must be an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!ok.count(it.key())) throw Error("config: unknown key '" + (where.empty() ? "" : where + ".") + it.key() + "'");
    }
}

template <typename V>
void read_field(const json& j, const char* key, V& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<V>();
    } catch (const json::exception& e) {
        throw Error("config: bad value for '" + (where.empty() ? "" : where + ".") + key + "': " + e.what());
    }
}

inline std::string prompt_mode_name(PromptMode m) { return m == PromptMode::sensor_index ? "sensor_index" : "sensor_names"; }

inline PromptMode prompt_mode_from(const std::string& s) {
    if (s == "sensor_names") return PromptMode::sensor_names;
    if (s == "sensor_index") return PromptMode::sensor_index;
    throw Error("config: unknown prompt_mode '" + s + "'");
}

inline Similarity similarity_from(const std::string& s) {
    if (s == "dot") return Similarity::dot;
    if (s == "cosine") return Similarity::cosine;
    throw Error("config: unknown similarity '" + s + "'");
}

}  // namespace detail

inline json to_json(const ModelConfig& m) {
    return {{"task", to_string(m.task)},
            {"sensors", m.sensors},
            {"length", m.length},
            {"patch_size", m.patch_size},
            {"window", m.window},
            {"encoder",
             {{"block_channels", m.encoder.block_channels},
              {"kernel", m.encoder.kernel},
              {"hidden", m.encoder.hidden},
              {"head_layers", m.encoder.head_layers}}},
            {"class_names", m.class_names},
            {"category_phrase", m.category_phrase},
            {"prompt_mode", detail::prompt_mode_name(m.prompt_mode)},
            {"text_dim", m.text_dim}};
}

inline json to_json(const TrainConfig& c) {
    return {{"model", to_json(c.model)},
            {"loss",
             {{"tau", c.loss.tau},
              {"lambda_sensor", c.loss.lambda_sensor},
              {"lambda_label", c.loss.lambda_label},
              {"lambda_edge", c.loss.lambda_edge},
              {"similarity", c.loss.similarity == Similarity::cosine ? "cosine" : "dot"}}},
            {"train",
             {{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"eval_batch_size", c.eval_batch_size},
              {"learning_rate", c.learning_rate},
              {"seed", c.seed},
              {"precision", c.precision},
              {"seeds", c.seeds},
              {"variant", c.variant}}},
            {"data", {{"train", c.data.train}, {"validation", c.data.validation}, {"test", c.data.test}}},
            {"embeddings", {{"table", c.embeddings.table}, {"fallback", c.embeddings.fallback}, {"fallback_seed", c.embeddings.fallback_seed}}}};
}

inline ModelConfig model_config_from_json(const json& j, ModelConfig m = {}) {
    detail::reject_unknown(j, "model",
                           {"task", "sensors", "length", "patch_size", "window", "encoder", "class_names", "category_phrase", "prompt_mode", "text_dim"});
    std::string task = to_string(m.task), mode = detail::prompt_mode_name(m.prompt_mode);
    detail::read_field(j, "task", task, "model");
    m.task = task_kind_from_string(task);
    detail::read_field(j, "sensors", m.sensors, "model");
    detail::read_field(j, "length", m.length, "model");
    detail::read_field(j, "patch_size", m.patch_size, "model");
    detail::read_field(j, "window", m.window, "model");
    detail::read_field(j, "class_names", m.class_names, "model");
    detail::read_field(j, "category_phrase", m.category_phrase, "model");
    detail::read_field(j, "prompt_mode", mode, "model");
    m.prompt_mode = detail::prompt_mode_from(mode);
    detail::read_field(j, "text_dim", m.text_dim, "model");
    if (j.contains("encoder")) {
        const auto& e = j.at("encoder");
        detail::reject_unknown(e, "model.encoder", {"block_channels", "kernel", "hidden", "head_layers"});
        detail::read_field(e, "block_channels", m.encoder.block_channels, "model.encoder");
        detail::read_field(e, "kernel", m.encoder.kernel, "model.encoder");
        detail::read_field(e, "hidden", m.encoder.hidden, "model.encoder");
        detail::read_field(e, "head_layers", m.encoder.head_layers, "model.encoder");
    }
    return m;
}

/// Parses a config document. "preset" picks the starting model architecture;
/// every other section overrides individual fields. Relative data and table
/// paths are resolved against base_dir.
inline TrainConfig config_from_json(const json& j, const std::filesystem::path& base_dir = {}) {
    detail::reject_unknown(j, "", {"preset", "model", "loss", "train", "data", "embeddings"});
    TrainConfig c;
    if (j.contains("preset")) c.model = preset_config(j.at("preset").get<std::string>());
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"), c.model);
    if (j.contains("loss")) {
        const auto& l = j.at("loss");
        detail::reject_unknown(l, "loss", {"tau", "lambda_sensor", "lambda_label", "lambda_edge", "similarity"});
        detail::read_field(l, "tau", c.loss.tau, "loss");
        detail::read_field(l, "lambda_sensor", c.loss.lambda_sensor, "loss");
        detail::read_field(l, "lambda_label", c.loss.lambda_label, "loss");
        detail::read_field(l, "lambda_edge", c.loss.lambda_edge, "loss");
        std::string sim = c.loss.similarity == Similarity::cosine ? "cosine" : "dot";
        detail::read_field(l, "similarity", sim, "loss");
        c.loss.similarity = detail::similarity_from(sim);
    }
    std::string variant = "full";
    if (j.contains("train")) {
        const auto& t = j.at("train");
        detail::reject_unknown(t, "train", {"epochs", "batch_size", "eval_batch_size", "learning_rate", "seed", "precision", "seeds", "variant"});
        detail::read_field(t, "epochs", c.epochs, "train");
        detail::read_field(t, "batch_size", c.batch_size, "train");
        detail::read_field(t, "eval_batch_size", c.eval_batch_size, "train");
        detail::read_field(t, "learning_rate", c.learning_rate, "train");
        detail::read_field(t, "seed", c.seed, "train");
        detail::read_field(t, "precision", c.precision, "train");
        detail::read_field(t, "seeds", c.seeds, "train");
        detail::read_field(t, "variant", variant, "train");
    }
    auto resolve = [&](std::string& p) {
        if (!p.empty() && !base_dir.empty() && std::filesystem::path(p).is_relative()) p = (base_dir / p).lexically_normal().string();
    };
    if (j.contains("data")) {
        const auto& d = j.at("data");
        detail::reject_unknown(d, "data", {"train", "validation", "test"});
        detail::read_field(d, "train", c.data.train, "data");
        detail::read_field(d, "validation", c.data.validation, "data");
        detail::read_field(d, "test", c.data.test, "data");
        resolve(c.data.train);
        resolve(c.data.validation);
        resolve(c.data.test);
    }
    if (j.contains("embeddings")) {
        const auto& e = j.at("embeddings");
        detail::reject_unknown(e, "embeddings", {"table", "fallback", "fallback_seed"});
        detail::read_field(e, "table", c.embeddings.table, "embeddings");
        detail::read_field(e, "fallback", c.embeddings.fallback, "embeddings");
        detail::read_field(e, "fallback_seed", c.embeddings.fallback_seed, "embeddings");
        resolve(c.embeddings.table);
    }
    c = apply_variant(c, variant);
    c.validate();
    return c;
}

inline json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw Error(path + ": " + e.what());
    }
}

inline TrainConfig load_config(const std::string& path) {
    return config_from_json(read_json_file(path), std::filesystem::path(path).parent_path());
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

/// Hash of the architecture section only; it decides checkpoint compatibility.
inline std::string config_hash(const ModelConfig& m) { return hex64(stable_hash(to_json(m).dump(), 0)); }

}  // namespace klink
