#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <istream>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "klink/config.hpp"
#include "klink/dataset.hpp"
#include "klink/metrics.hpp"

namespace klink {

/// One self-describing record per line:
/// {"id","subject","sensors":[..],"n","l","label","values":[n*l row-major]}.
inline std::string sample_record_line(const MtsSample& s) {
    return json{{"id", s.sample_id},
                {"subject", s.subject},
                {"sensors", s.sensor_names},
                {"n", s.sensors()},
                {"l", s.length()},
                {"label", s.label},
                {"values", s.signal.values()}}
        .dump();
}

inline void write_samples(std::ostream& out, const std::vector<MtsSample>& samples) {
    for (const auto& s : samples) out << sample_record_line(s) << '\n';
}

inline MtsSample sample_from_json(const json& j) {
    MtsSample s;
    s.sample_id = j.at("id").get<std::string>();
    s.subject = j.value("subject", s.sample_id);
    s.sensor_names = j.at("sensors").get<std::vector<std::string>>();
    const auto n = j.at("n").get<std::size_t>(), l = j.at("l").get<std::size_t>();
    s.label = j.at("label").get<double>();
    auto values = j.at("values").get<std::vector<double>>();
    if (n == 0 || l == 0) throw Error("sample " + s.sample_id + ": empty signal");
    if (s.sensor_names.size() != n) {
        throw Error("sample " + s.sample_id + ": " + std::to_string(s.sensor_names.size()) + " sensor names for n=" + std::to_string(n));
    }
    if (values.size() != n * l) {
        throw Error("sample " + s.sample_id + ": " + std::to_string(values.size()) + " values, expected n*l=" + std::to_string(n * l));
    }
    s.signal = Tensor<double>(Shape{n, l});
    std::copy(values.begin(), values.end(), s.signal.data());
    return s;
}

inline std::vector<MtsSample> read_samples(std::istream& in, const std::string& origin = "samples") {
    std::vector<MtsSample> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(sample_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw Error(origin + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const Error& e) {
            throw Error(origin + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

inline std::vector<MtsSample> read_samples(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open sample file " + path);
    return read_samples(in, path);
}

inline json to_json(const NormalizationStats& s) { return {{"min", s.min}, {"max", s.max}}; }

inline NormalizationStats normalization_from_json(const json& j) {
    NormalizationStats s{j.at("min").get<std::vector<double>>(), j.at("max").get<std::vector<double>>()};
    if (s.min.size() != s.max.size()) throw Error("normalization stats: min/max length mismatch");
    return s;
}

inline json to_json(const Tensor<double>& t) {
    return {{"shape", t.shape()}, {"values", std::vector<double>(t.data(), t.data() + t.numel())}};
}

/// Record of one metric value of one run, written one per line.
struct MetricRecord {
    std::string variant;
    std::uint64_t seed = 0;
    std::string metric;
    double value = 0.0;
    std::optional<double> lambda;
};

inline std::string metric_record_line(const MetricRecord& r) {
    json j{{"variant", r.variant}, {"seed", r.seed}, {"metric", r.metric}, {"value", r.value}};
    if (r.lambda) j["lambda"] = *r.lambda;
    return j.dump();
}

inline std::vector<MetricRecord> metric_records(const std::string& variant, const MetricsReport& report, std::optional<double> lambda = {}) {
    std::vector<MetricRecord> out;
    for (std::size_t k = 0; k < report.runs.size(); ++k)
        for (const auto& name : report.names()) out.push_back({variant, report.seeds[k], name, report.runs[k].get(name), lambda});
    return out;
}

inline std::string format_mean_std(double mean, double sd) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f +- %.4f", mean, sd);
    return buf;
}

/// Fixed-width summary table, one row per labelled report.
inline std::string summary_table(const std::string& row_header, const std::vector<std::pair<std::string, MetricsReport>>& rows) {
    if (rows.empty()) return "";
    const auto names = rows.front().second.names();
    std::size_t width = row_header.size();
    for (const auto& r : rows) width = std::max(width, r.first.size());
    std::ostringstream os;
    auto pad = [](std::string s, std::size_t w) {
        s.resize(std::max(s.size(), w), ' ');
        return s;
    };
    os << pad(row_header, width) << "  runs";
    for (const auto& n : names) os << "  " << pad(n, 20);
    os << '\n';
    for (const auto& [label, report] : rows) {
        os << pad(label, width) << "  " << pad(std::to_string(report.runs.size()), 4);
        for (const auto& n : names) os << "  " << pad(format_mean_std(report.mean(n), report.stddev(n)), 20);
        os << '\n';
    }
    return os.str();
}

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

struct RunManifest {
    std::string command;
    std::string config_path;
    json config;
    std::string output_dir;
    std::string started;
    std::string finished;

    json to_json() const {
        return {{"command", command}, {"config_path", config_path}, {"config", config}, {"output_dir", output_dir}, {"started", started},
                {"finished", finished}};
    }
};

/// Output files held in memory and written together at the end, so a failed
/// command leaves nothing behind. Files are written through a temporary name
/// and renamed into place.
class StagedOutputs {
   public:
    explicit StagedOutputs(std::filesystem::path dir) : dir_(std::move(dir)) {}

    std::ostringstream& file(const std::string& name) {
        for (auto& [n, s] : files_)
            if (n == name) return *s;
        files_.emplace_back(name, std::make_unique<std::ostringstream>());
        return *files_.back().second;
    }

    const std::filesystem::path& dir() const { return dir_; }

    std::vector<std::filesystem::path> commit() {
        std::filesystem::create_directories(dir_);
        std::vector<std::filesystem::path> written;
        for (const auto& [name, content] : files_) {
            const auto target = dir_ / name;
            const auto tmp = dir_ / (name + ".tmp");
            {
                std::ofstream out(tmp, std::ios::binary);
                if (!out) throw Error("cannot write " + tmp.string());
                out << content->str();
                if (!out) throw Error("write failed: " + tmp.string());
            }
            std::filesystem::rename(tmp, target);
            written.push_back(target);
        }
        return written;
    }

   private:
    std::filesystem::path dir_;
    std::vector<std::pair<std::string, std::unique_ptr<std::ostringstream>>> files_;
};

}  // namespace klink
