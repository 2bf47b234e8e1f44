#pragma once

#include <string>
#include <vector>

#include "klink/dataset.hpp"
#include "klink/model.hpp"
#include "klink/random.hpp"

namespace fixture {

/// N=3 sensors, L=4, f=2 (two patches), window 2, d_h=4, two classes.
inline klink::ModelConfig tiny_config(klink::TaskKind task = klink::TaskKind::classification) {
    klink::ModelConfig c;
    c.task = task;
    c.sensors = 3;
    c.length = 4;
    c.patch_size = 2;
    c.window = 2;
    c.encoder = {{1, 3}, 2, 4, {4 * 3 * 1, task == klink::TaskKind::regression ? std::size_t{1} : std::size_t{2}}};
    c.class_names = task == klink::TaskKind::regression ? std::vector<std::string>{} : std::vector<std::string>{"low", "high"};
    c.category_phrase = task == klink::TaskKind::regression ? "remaining useful life of a machine" : "level";
    return c;
}

inline std::vector<klink::MtsSample> random_samples(const klink::ModelConfig& c, std::size_t count, std::uint64_t seed) {
    klink::Rng rng(seed);
    std::vector<klink::MtsSample> out;
    const std::vector<std::string> names{"fan speed", "core speed", "bypass ratio", "pressure", "flow", "humidity"};
    for (std::size_t k = 0; k < count; ++k) {
        klink::MtsSample s;
        s.signal = klink::normal_tensor<double>(klink::Shape{c.sensors, c.length}, 1.0, rng);
        s.label = c.task == klink::TaskKind::regression ? 10.0 + 5.0 * double(k) : double(k % c.outputs());
        for (std::size_t i = 0; i < c.sensors; ++i) s.sensor_names.push_back(names[i % names.size()] + " " + std::to_string(i / names.size() + 1));
        s.sample_id = "s" + std::to_string(k);
        s.subject = s.sample_id;
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace fixture
