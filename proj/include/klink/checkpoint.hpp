#pragma once

#include <cstddef>
#include <fstream>
#include <istream>
#include <memory>
#include <ostream>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "klink/config.hpp"
#include "klink/model.hpp"
#include "klink/optim.hpp"

namespace klink {

inline constexpr const char* kCheckpointFormat = "klink-checkpoint";
inline constexpr int kCheckpointVersion = 1;

namespace detail {

template <typename T>
json tensor_record(const std::string& name, const Tensor<T>& t) {
    std::vector<double> values(t.numel());
    for (std::size_t k = 0; k < t.numel(); ++k) values[k] = static_cast<double>(t[k]);
    return {{"name", name}, {"shape", t.shape()}, {"values", values}};
}

template <typename T>
Tensor<T> tensor_from_record(const json& j, const Shape& expected) {
    const auto name = j.at("name").get<std::string>();
    const auto shape = j.at("shape").get<Shape>();
    if (shape != expected) throw Error("checkpoint: tensor " + name + " has shape " + shape_str(shape) + ", model expects " + shape_str(expected));
    const auto values = j.at("values").get<std::vector<double>>();
    if (values.size() != shape_numel(shape)) throw Error("checkpoint: tensor " + name + " value count does not match its shape");
    Tensor<T> t(shape);
    for (std::size_t k = 0; k < values.size(); ++k) t[k] = static_cast<T>(values[k]);
    return t;
}

}  // namespace detail

template <typename T>
constexpr int precision_bits() {
    return std::is_same_v<T, float> ? 32 : 64;
}

/// Self-describing JSON container: versioned header, architecture and its
/// hash, named row-major tensors, batchnorm buffers and Adam state.
template <typename T>
json checkpoint_to_json(KLinkModel<T>& model, const TrainConfig& config, std::size_t epoch, const AdamState<T>& optimizer) {
    json j{{"format", kCheckpointFormat},
           {"version", kCheckpointVersion},
           {"precision", precision_bits<T>()},
           {"config_hash", config_hash(model.config)},
           {"config", to_json(config)},
           {"epoch", epoch}};
    j["config"]["model"] = to_json(model.config);
    auto& tensors = j["tensors"] = json::array();
    for (auto* p : model.parameters()) tensors.push_back(detail::tensor_record(p->name, p->value));
    auto& buffers = j["buffers"] = json::array();
    auto bs = model.buffers();
    for (std::size_t b = 0; b < bs.size(); ++b) {
        buffers.push_back(detail::tensor_record("block" + std::to_string(b) + ".running_mean", bs[b]->running_mean));
        buffers.push_back(detail::tensor_record("block" + std::to_string(b) + ".running_var", bs[b]->running_var));
    }
    json first = json::array(), second = json::array();
    for (std::size_t k = 0; k < optimizer.first_moment.size(); ++k) {
        first.push_back(detail::tensor_record("m" + std::to_string(k), optimizer.first_moment[k]));
        second.push_back(detail::tensor_record("v" + std::to_string(k), optimizer.second_moment[k]));
    }
    j["optimizer"] = {{"step", optimizer.step},
                      {"learning_rate", static_cast<double>(optimizer.learning_rate)},
                      {"beta1", static_cast<double>(optimizer.beta1)},
                      {"beta2", static_cast<double>(optimizer.beta2)},
                      {"epsilon", static_cast<double>(optimizer.epsilon)},
                      {"first_moment", first},
                      {"second_moment", second}};
    return j;
}

template <typename T>
struct LoadedCheckpoint {
    std::unique_ptr<KLinkModel<T>> model;
    TrainConfig config;
    std::size_t epoch = 0;
    AdamState<T> optimizer;
};

template <typename T>
LoadedCheckpoint<T> checkpoint_from_json(const json& j) {
    if (j.value("format", std::string{}) != kCheckpointFormat) throw Error("checkpoint: not a checkpoint file");
    if (j.value("version", 0) != kCheckpointVersion) throw Error("checkpoint: unsupported version " + std::to_string(j.value("version", 0)));
    if (j.at("precision").get<int>() != precision_bits<T>()) {
        throw Error("checkpoint: stored at " + std::to_string(j.at("precision").get<int>()) + "-bit, loading at " +
                    std::to_string(precision_bits<T>()) + "-bit");
    }
    LoadedCheckpoint<T> out;
    out.config = config_from_json(j.at("config"));
    if (config_hash(out.config.model) != j.at("config_hash").get<std::string>()) throw Error("checkpoint: config hash mismatch");
    out.epoch = j.at("epoch").get<std::size_t>();
    out.model = std::make_unique<KLinkModel<T>>(out.config.model, out.config.seed);

    std::unordered_map<std::string, const json*> by_name;
    for (const auto& t : j.at("tensors")) by_name[t.at("name").get<std::string>()] = &t;
    for (auto* p : out.model->parameters()) {
        auto it = by_name.find(p->name);
        if (it == by_name.end()) throw Error("checkpoint: missing tensor " + p->name);
        p->value = detail::tensor_from_record<T>(*it->second, p->value.shape());
        p->zero_grad();
    }
    if (by_name.size() != out.model->parameters().size()) throw Error("checkpoint: unexpected extra tensors");
    const auto& buffers = j.at("buffers");
    auto bs = out.model->buffers();
    if (buffers.size() != 2 * bs.size()) throw Error("checkpoint: expected " + std::to_string(2 * bs.size()) + " batchnorm buffers");
    for (std::size_t b = 0; b < bs.size(); ++b) {
        bs[b]->running_mean = detail::tensor_from_record<T>(buffers[2 * b], bs[b]->running_mean.shape());
        bs[b]->running_var = detail::tensor_from_record<T>(buffers[2 * b + 1], bs[b]->running_var.shape());
    }
    const auto& o = j.at("optimizer");
    out.optimizer.step = o.at("step").get<std::size_t>();
    out.optimizer.learning_rate = static_cast<T>(o.at("learning_rate").get<double>());
    out.optimizer.beta1 = static_cast<T>(o.at("beta1").get<double>());
    out.optimizer.beta2 = static_cast<T>(o.at("beta2").get<double>());
    out.optimizer.epsilon = static_cast<T>(o.at("epsilon").get<double>());
    auto params = out.model->parameters();
    const auto& first = o.at("first_moment");
    const auto& second = o.at("second_moment");
    if (!first.empty() && (first.size() != params.size() || second.size() != params.size())) {
        throw Error("checkpoint: optimizer state does not match parameter count");
    }
    for (std::size_t k = 0; k < first.size(); ++k) {
        out.optimizer.first_moment.push_back(detail::tensor_from_record<T>(first[k], params[k]->value.shape()));
        out.optimizer.second_moment.push_back(detail::tensor_from_record<T>(second[k], params[k]->value.shape()));
    }
    return out;
}

template <typename T>
void save_checkpoint(std::ostream& out, KLinkModel<T>& model, const TrainConfig& config, std::size_t epoch, const AdamState<T>& optimizer) {
    out << checkpoint_to_json(model, config, epoch, optimizer).dump() << '\n';
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(std::istream& in) {
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw Error(std::string("checkpoint: ") + e.what());
    }
    return checkpoint_from_json<T>(j);
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open checkpoint " + path);
    return load_checkpoint<T>(in);
}

/// Reads only the precision field so a caller can pick the instantiation.
inline int checkpoint_precision(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open checkpoint " + path);
    try {
        return json::parse(in).at("precision").get<int>();
    } catch (const json::exception& e) {
        throw Error("checkpoint " + path + ": " + e.what());
    }
}

}  // namespace klink
