#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "klink/random.hpp"
#include "klink/tensor.hpp"

namespace klink {

enum class TaskKind { regression, classification };

inline std::string to_string(TaskKind k) { return k == TaskKind::regression ? "regression" : "classification"; }

inline TaskKind task_kind_from_string(const std::string& s) {
    if (s == "regression") return TaskKind::regression;
    if (s == "classification") return TaskKind::classification;
    throw Error("unknown task kind '" + s + "'");
}

/// One multivariate window: N sensors (rows) by L timestamps (columns).
/// For classification the label holds the class index.
struct MtsSample {
    Tensor<double> signal;
    double label = 0.0;
    std::vector<std::string> sensor_names;
    std::string sample_id;
    std::string subject;

    std::size_t sensors() const { return signal.dim(0); }
    std::size_t length() const { return signal.dim(1); }
};

/// Patch t holds columns [t*f, (t+1)*f) of every sensor.
struct PatchSet {
    std::vector<Tensor<double>> patches;
    std::size_t patch_size = 0;
    std::size_t patch_count() const { return patches.size(); }
};

struct NormalizationStats {
    std::vector<double> min;
    std::vector<double> max;
};

struct DatasetSplit {
    std::vector<MtsSample> train;
    std::vector<MtsSample> validation;
    std::vector<MtsSample> test;
    std::vector<double> ratios;
    std::uint64_t seed = 0;
};

/// Number of whole patches; the trailing L mod f columns are discarded.
inline std::size_t patch_count(std::size_t length, std::size_t patch_size) { return length / patch_size; }

inline PatchSet partition(const MtsSample& sample, std::size_t patch_size) {
    if (patch_size == 0) throw Error("partition: patch size must be >= 1");
    const std::size_t n = sample.sensors(), l = sample.length();
    if (patch_size > l) {
        throw Error("partition: patch size " + std::to_string(patch_size) + " exceeds sample length " + std::to_string(l));
    }
    PatchSet out;
    out.patch_size = patch_size;
    for (std::size_t t = 0; t < patch_count(l, patch_size); ++t) {
        Tensor<double> p(Shape{n, patch_size});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < patch_size; ++k) p.at(i, k) = sample.signal.at(i, t * patch_size + k);
        out.patches.push_back(std::move(p));
    }
    return out;
}

inline Tensor<double> concat_patches(const PatchSet& ps) {
    const std::size_t n = ps.patches.at(0).dim(0), f = ps.patch_size;
    Tensor<double> out(Shape{n, f * ps.patch_count()});
    for (std::size_t t = 0; t < ps.patch_count(); ++t)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < f; ++k) out.at(i, t * f + k) = ps.patches[t].at(i, k);
    return out;
}

// ---------------------------------------------------------------------------
// Normalization

inline NormalizationStats compute_normalization(const std::vector<MtsSample>& train) {
    if (train.empty()) throw Error("compute_normalization: empty training split");
    const std::size_t n = train.front().sensors();
    NormalizationStats s{std::vector<double>(n, INFINITY), std::vector<double>(n, -INFINITY)};
    for (const auto& smp : train) {
        if (smp.sensors() != n) throw Error("compute_normalization: inconsistent sensor count in " + smp.sample_id);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t t = 0; t < smp.length(); ++t) {
                s.min[i] = std::min(s.min[i], smp.signal.at(i, t));
                s.max[i] = std::max(s.max[i], smp.signal.at(i, t));
            }
    }
    return s;
}

/// (x - min) / (max - min) per sensor; a constant sensor maps to 0.
inline void minmax_normalize(std::vector<MtsSample>& samples, const NormalizationStats& stats) {
    for (auto& smp : samples) {
        if (smp.sensors() != stats.min.size()) throw Error("minmax_normalize: sensor count mismatch in " + smp.sample_id);
        for (std::size_t i = 0; i < smp.sensors(); ++i) {
            const double range = stats.max[i] - stats.min[i];
            for (std::size_t t = 0; t < smp.length(); ++t) {
                auto& v = smp.signal.at(i, t);
                v = range > 0.0 ? (v - stats.min[i]) / range : 0.0;
            }
        }
    }
}

/// Keeps every interval-th timestamp starting at 0; new length ceil(L / interval).
inline MtsSample downsample(const MtsSample& sample, std::size_t interval) {
    if (interval == 0) throw Error("downsample: interval must be >= 1");
    const std::size_t n = sample.sensors(), l = sample.length();
    const std::size_t lo = (l + interval - 1) / interval;
    MtsSample out = sample;
    out.signal = Tensor<double>(Shape{n, lo});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < lo; ++t) out.signal.at(i, t) = sample.signal.at(i, t * interval);
    return out;
}

// ---------------------------------------------------------------------------
// Remaining-useful-life corpora

struct UnitSeries {
    std::string unit_id;
    Tensor<double> series;  // N x T, sensor-major
};

struct RulWindowing {
    std::size_t window = 50;
    std::size_t stride = 1;
    double cap = 125.0;
};

/// Slides a window of length L with stride S over each unit; window a gets
/// label min(T - L - a*S, cap). Units shorter than L are skipped and reported
/// in warnings.
inline std::vector<MtsSample> ingest_rul_corpus(const std::vector<UnitSeries>& units, const RulWindowing& w,
                                                const std::vector<std::string>& sensor_names,
                                                std::vector<std::string>* warnings = nullptr) {
    if (w.stride == 0) throw Error("ingest_rul_corpus: stride must be >= 1");
    if (w.window == 0) throw Error("ingest_rul_corpus: window must be >= 1");
    std::vector<MtsSample> out;
    for (const auto& u : units) {
        const std::size_t n = u.series.dim(0), T = u.series.dim(1);
        if (sensor_names.size() != n) throw Error("ingest_rul_corpus: sensor name count does not match unit " + u.unit_id);
        if (T < w.window) {
            if (warnings) {
                warnings->push_back("unit " + u.unit_id + " skipped: length " + std::to_string(T) + " < window " +
                                    std::to_string(w.window));
            }
            continue;
        }
        for (std::size_t a = 0; a * w.stride + w.window <= T; ++a) {
            MtsSample s;
            s.signal = Tensor<double>(Shape{n, w.window});
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t t = 0; t < w.window; ++t) s.signal.at(i, t) = u.series.at(i, a * w.stride + t);
            const double rul = static_cast<double>(T) - static_cast<double>(w.window) - static_cast<double>(a * w.stride);
            s.label = std::min(rul, w.cap);
            s.sensor_names = sensor_names;
            s.sample_id = u.unit_id + "-" + std::to_string(a);
            s.subject = u.unit_id;
            out.push_back(std::move(s));
        }
    }
    return out;
}

/// Column layout of a whitespace-delimited run-to-failure table
/// (unit, cycle, operating settings..., sensors...).
struct RulRawLayout {
    std::size_t unit_column = 0;
    std::size_t first_sensor_column = 5;
    std::size_t sensor_columns = 21;
    /// 1-based sensor indices removed as constant-valued.
    std::vector<std::size_t> dropped_sensors{1, 5, 6, 10, 16, 18, 19};
};

/// Descriptive names of the 21 turbofan sensors, used for prompts.
inline const std::vector<std::string>& turbofan_sensor_names() {
    static const std::vector<std::string> names{
        "total temperature at fan inlet",
        "total temperature at low pressure compressor outlet",
        "total temperature at high pressure compressor outlet",
        "total temperature at low pressure turbine outlet",
        "pressure at fan inlet",
        "total pressure in bypass duct",
        "total pressure at high pressure compressor outlet",
        "physical fan speed",
        "physical core speed",
        "engine pressure ratio",
        "static pressure at high pressure compressor outlet",
        "ratio of fuel flow to static pressure",
        "corrected fan speed",
        "corrected core speed",
        "bypass ratio",
        "burner fuel air ratio",
        "bleed enthalpy",
        "demanded fan speed",
        "demanded corrected fan speed",
        "high pressure turbine coolant bleed",
        "low pressure turbine coolant bleed",
    };
    return names;
}

struct RulRawTable {
    std::vector<UnitSeries> units;
    std::vector<std::string> sensor_names;
};

inline RulRawTable read_rul_raw(std::istream& in, const RulRawLayout& layout = {}) {
    std::set<std::size_t> dropped(layout.dropped_sensors.begin(), layout.dropped_sensors.end());
    std::vector<std::size_t> kept;
    for (std::size_t s = 1; s <= layout.sensor_columns; ++s)
        if (!dropped.count(s)) kept.push_back(s);
    RulRawTable table;
    const auto& names = turbofan_sensor_names();
    for (auto s : kept) table.sensor_names.push_back(s <= names.size() ? names[s - 1] : "sensor " + std::to_string(s));

    std::map<long, std::vector<std::vector<double>>> rows_by_unit;
    std::vector<long> order;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream ls(line);
        std::vector<double> cols;
        double v;
        while (ls >> v) cols.push_back(v);
        if (cols.empty()) continue;
        if (cols.size() < layout.first_sensor_column + layout.sensor_columns || cols.size() <= layout.unit_column) {
            throw Error("rul raw: line " + std::to_string(line_no) + " has " + std::to_string(cols.size()) + " columns");
        }
        const long unit = static_cast<long>(cols[layout.unit_column]);
        if (!rows_by_unit.count(unit)) order.push_back(unit);
        std::vector<double> sensors;
        for (auto s : kept) sensors.push_back(cols[layout.first_sensor_column + s - 1]);
        rows_by_unit[unit].push_back(std::move(sensors));
    }
    for (long unit : order) {
        const auto& rows = rows_by_unit[unit];
        Tensor<double> series(Shape{kept.size(), rows.size()});
        for (std::size_t t = 0; t < rows.size(); ++t)
            for (std::size_t i = 0; i < kept.size(); ++i) series.at(i, t) = rows[t][i];
        table.units.push_back({std::to_string(unit), std::move(series)});
    }
    return table;
}

// ---------------------------------------------------------------------------
// Splitting

/// Splits by subject: every subject's samples land in exactly one split.
/// ratios = {train, validation, test}; subjects are shuffled with the seed.
inline DatasetSplit split_by_subject(std::vector<MtsSample> samples, std::vector<double> ratios, std::uint64_t seed) {
    if (ratios.size() != 3) throw Error("split_by_subject: need three ratios");
    std::vector<std::string> subjects;
    std::set<std::string> seen;
    for (const auto& s : samples)
        if (seen.insert(s.subject).second) subjects.push_back(s.subject);
    Rng rng(seed);
    rng.shuffle(subjects.begin(), subjects.end());
    const double total = ratios[0] + ratios[1] + ratios[2];
    const auto n = subjects.size();
    const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios[0] / total));
    const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios[1] / total));
    std::map<std::string, int> where;
    for (std::size_t k = 0; k < n; ++k) where[subjects[k]] = k < n_train ? 0 : (k < n_train + n_val ? 1 : 2);
    DatasetSplit split;
    split.ratios = ratios;
    split.seed = seed;
    for (auto& s : samples) {
        switch (where[s.subject]) {
            case 0: split.train.push_back(std::move(s)); break;
            case 1: split.validation.push_back(std::move(s)); break;
            default: split.test.push_back(std::move(s)); break;
        }
    }
    return split;
}

/// Per-window split: samples are shuffled individually (ignores subjects).
inline DatasetSplit split_by_window(std::vector<MtsSample> samples, std::vector<double> ratios, std::uint64_t seed) {
    for (std::size_t k = 0; k < samples.size(); ++k) samples[k].subject = samples[k].sample_id;
    return split_by_subject(std::move(samples), std::move(ratios), seed);
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SyntheticSpec {
    std::size_t sensors = 6;
    std::size_t classes = 3;
    std::size_t groups = 3;
    double noise = 0.3;
    std::uint64_t seed = 7;
    std::size_t length = 32;
    std::size_t train = 60;
    std::size_t validation = 30;
    std::size_t test = 90;
};

struct SyntheticCorpus {
    DatasetSplit split;
    std::vector<std::size_t> group_of;  // group index per sensor
    Tensor<double> relations;           // N x N, 1 within a group, 0 across
    std::vector<std::string> class_names;
};

inline std::size_t synthetic_group(std::size_t sensor, std::size_t sensors, std::size_t groups) {
    return sensor * groups / sensors;
}

/// Sensors in a group share one latent sinusoid plus independent Gaussian
/// noise. The class sets each group's frequency, and every sample draws its
/// own phases, so per-sensor means carry almost no class information.
inline SyntheticCorpus make_synthetic(const SyntheticSpec& spec) {
    if (spec.groups < 2) throw Error("make_synthetic: need at least 2 correlation groups");
    if (spec.sensors < spec.groups) throw Error("make_synthetic: fewer sensors than groups");
    if (spec.classes < 2) throw Error("make_synthetic: need at least 2 classes");
    static const std::vector<std::string> kinds{"temperature", "pressure", "vibration", "flow", "voltage", "humidity"};
    Rng rng(spec.seed);
    SyntheticCorpus corpus;
    const std::size_t n = spec.sensors, l = spec.length;
    std::vector<std::string> names(n);
    std::vector<std::size_t> index_in_group(spec.groups, 0);
    std::vector<double> gain(n), offset(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t g = synthetic_group(i, n, spec.groups);
        corpus.group_of.push_back(g);
        const std::string kind = g < kinds.size() ? kinds[g] : "quantity " + std::to_string(g);
        names[i] = kind + " " + std::to_string(++index_in_group[g]);
        gain[i] = rng.uniform(0.6, 1.4);
        offset[i] = rng.uniform(-1.0, 1.0);
    }
    corpus.relations = Tensor<double>(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) corpus.relations.at(i, j) = corpus.group_of[i] == corpus.group_of[j] ? 1.0 : 0.0;
    for (std::size_t c = 0; c < spec.classes; ++c) corpus.class_names.push_back("state " + std::to_string(c));

    auto make = [&](std::size_t count, const std::string& prefix) {
        std::vector<MtsSample> out;
        for (std::size_t k = 0; k < count; ++k) {
            const std::size_t c = k % spec.classes;
            std::vector<std::vector<double>> latent(spec.groups, std::vector<double>(l));
            for (std::size_t g = 0; g < spec.groups; ++g) {
                const double freq = 1.0 + static_cast<double>((c + g) % spec.classes);
                const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
                for (std::size_t t = 0; t < l; ++t)
                    latent[g][t] = std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(t) / static_cast<double>(l) + phase);
            }
            MtsSample s;
            s.signal = Tensor<double>(Shape{n, l});
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t t = 0; t < l; ++t)
                    s.signal.at(i, t) = gain[i] * latent[corpus.group_of[i]][t] + offset[i] + spec.noise * rng.normal();
            s.label = static_cast<double>(c);
            s.sensor_names = names;
            char id[64];
            std::snprintf(id, sizeof id, "%s-%04zu", prefix.c_str(), k);
            s.sample_id = id;
            s.subject = id;
            out.push_back(std::move(s));
        }
        return out;
    };
    corpus.split.train = make(spec.train, "syn-train");
    corpus.split.validation = make(spec.validation, "syn-val");
    corpus.split.test = make(spec.test, "syn-test");
    const double total = static_cast<double>(spec.train + spec.validation + spec.test);
    corpus.split.ratios = {spec.train / total, spec.validation / total, spec.test / total};
    corpus.split.seed = spec.seed;
    return corpus;
}

/// Pearson correlation of two sensor rows across all samples' timestamps.
inline double sensor_correlation(const std::vector<MtsSample>& samples, std::size_t a, std::size_t b) {
    double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0, n = 0;
    for (const auto& s : samples)
        for (std::size_t t = 0; t < s.length(); ++t) {
            const double x = s.signal.at(a, t), y = s.signal.at(b, t);
            sa += x;
            sb += y;
            saa += x * x;
            sbb += y * y;
            sab += x * y;
            n += 1;
        }
    const double cov = sab / n - sa / n * sb / n;
    const double va = saa / n - sa / n * sa / n, vb = sbb / n - sb / n * sb / n;
    return cov / std::sqrt(va * vb);
}

}  // namespace klink
