#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "klink/dataset.hpp"
#include "klink/tensor.hpp"

namespace klink {

namespace detail {
inline void require_pairs(const char* what, std::size_t predictions, std::size_t targets) {
    if (predictions == 0) throw Error(std::string(what) + ": empty input");
    if (predictions != targets) {
        throw Error(std::string(what) + ": " + std::to_string(predictions) + " predictions for " + std::to_string(targets) + " targets");
    }
}
}  // namespace detail

inline double rmse(const std::vector<double>& predicted, const std::vector<double>& actual) {
    detail::require_pairs("rmse", predicted.size(), actual.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < predicted.size(); ++i) acc += (predicted[i] - actual[i]) * (predicted[i] - actual[i]);
    return std::sqrt(acc / static_cast<double>(predicted.size()));
}

/// Asymmetric prognostics score for one prediction; late predictions
/// (d > 0) are penalized harder than early ones.
inline double score_term(double predicted, double actual) {
    const double d = predicted - actual;
    return d < 0.0 ? std::exp(-d / 13.0) - 1.0 : std::exp(d / 10.0) - 1.0;
}

/// Mean of score_term over all samples.
inline double score(const std::vector<double>& predicted, const std::vector<double>& actual) {
    detail::require_pairs("score", predicted.size(), actual.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < predicted.size(); ++i) acc += score_term(predicted[i], actual[i]);
    return acc / static_cast<double>(predicted.size());
}

inline double accuracy(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& actual) {
    detail::require_pairs("accuracy", predicted.size(), actual.size());
    std::size_t hit = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) hit += predicted[i] == actual[i];
    return static_cast<double>(hit) / static_cast<double>(predicted.size());
}

/// Unweighted mean of per-class F1 over every class that occurs in either
/// the predictions or the targets. A class with no true positives scores 0.
inline double macro_f1(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& actual) {
    detail::require_pairs("macro_f1", predicted.size(), actual.size());
    std::set<std::size_t> classes(predicted.begin(), predicted.end());
    classes.insert(actual.begin(), actual.end());
    double total = 0.0;
    for (auto c : classes) {
        std::size_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < predicted.size(); ++i) {
            const bool p = predicted[i] == c, a = actual[i] == c;
            tp += p && a;
            fp += p && !a;
            fn += !p && a;
        }
        total += tp == 0 ? 0.0 : 2.0 * double(tp) / double(2 * tp + fp + fn);
    }
    return total / static_cast<double>(classes.size());
}

inline std::vector<std::size_t> argmax_rows(const Tensor<double>& logits) {
    std::vector<std::size_t> out(logits.dim(0));
    for (std::size_t r = 0; r < logits.dim(0); ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.dim(1); ++c)
            if (logits.at(r, c) > logits.at(r, best)) best = c;
        out[r] = best;
    }
    return out;
}

/// Metrics of one evaluated run. Only the fields of its task kind are set.
struct Metrics {
    TaskKind task = TaskKind::classification;
    double rmse = 0.0;
    double score = 0.0;
    double accuracy = 0.0;
    double macro_f1 = 0.0;

    std::vector<std::string> names() const {
        return task == TaskKind::regression ? std::vector<std::string>{"rmse", "score"} : std::vector<std::string>{"accuracy", "mf1"};
    }

    double get(const std::string& name) const {
        if (task == TaskKind::regression) {
            if (name == "rmse") return rmse;
            if (name == "score") return score;
        } else {
            if (name == "accuracy") return accuracy;
            if (name == "mf1") return macro_f1;
        }
        throw Error("metric '" + name + "' not defined for " + to_string(task));
    }

    /// Selection metric, oriented so that larger is better.
    double selection_value() const { return task == TaskKind::regression ? -score : accuracy; }
};

/// Scores a prediction matrix ([n,1] for regression, logits [n,C] otherwise).
inline Metrics compute_metrics(TaskKind task, const Tensor<double>& predictions, const std::vector<double>& labels) {
    Metrics m;
    m.task = task;
    if (task == TaskKind::regression) {
        std::vector<double> p(predictions.dim(0));
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = predictions.at(i, 0);
        m.rmse = rmse(p, labels);
        m.score = score(p, labels);
    } else {
        std::vector<std::size_t> truth;
        for (double y : labels) truth.push_back(static_cast<std::size_t>(std::llround(y)));
        auto p = argmax_rows(predictions);
        m.accuracy = accuracy(p, truth);
        m.macro_f1 = macro_f1(p, truth);
    }
    return m;
}

inline double mean_of(const std::vector<double>& v) {
    if (v.empty()) throw Error("mean of empty list");
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

/// Sample standard deviation; 0 for a single value.
inline double stddev_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

/// Per-seed metrics of one configuration plus their mean and spread.
struct MetricsReport {
    TaskKind task = TaskKind::classification;
    std::vector<std::uint64_t> seeds;
    std::vector<Metrics> runs;

    void add(std::uint64_t seed, const Metrics& m) {
        if (!runs.empty() && m.task != task) throw Error("metrics report: mixed task kinds");
        task = m.task;
        seeds.push_back(seed);
        runs.push_back(m);
    }

    std::vector<double> values(const std::string& name) const {
        std::vector<double> out;
        for (const auto& r : runs) out.push_back(r.get(name));
        return out;
    }
    double mean(const std::string& name) const { return mean_of(values(name)); }
    double stddev(const std::string& name) const { return stddev_of(values(name)); }
    std::vector<std::string> names() const { return Metrics{task}.names(); }
};

}  // namespace klink
