#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "klink/klink.hpp"

namespace fs = std::filesystem;
using namespace klink;

namespace {

struct Options {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::string variant;
    std::string lambda;
    std::string embeddings;
    bool fallback = false;

    std::string format;
    std::string source;
    std::string preset = "fd002";
    std::size_t window = 0;
    std::size_t stride = 1;
    double cap = 125.0;
    std::vector<double> ratios{0.7, 0.1, 0.2};

    std::string data;
    bool index_prompts = false;

    std::string checkpoint;
    std::string split = "test";
};

int emit_error(const std::string& command, const std::string& message) {
    std::cerr << json{{"error", message}, {"command", command}}.dump() << std::endl;
    return 1;
}

TrainConfig resolve_config(const Options& o) {
    TrainConfig c = o.config.empty() ? TrainConfig{} : load_config(o.config);
    if (!o.variant.empty()) c = apply_variant(c, o.variant);
    if (o.seed) {
        c.seed = *o.seed;
        c.seeds = {*o.seed};
    }
    if (!o.embeddings.empty()) c.embeddings.table = o.embeddings;
    if (o.fallback) c.embeddings.fallback = true;
    c.validate();
    return c;
}

std::vector<MtsSample> load_part(const std::string& path, const char* key, const ModelConfig& m) {
    if (path.empty()) throw Error(std::string("config: data.") + key + " is not set");
    auto samples = read_samples(path);
    if (samples.empty()) throw Error(path + ": no samples");
    for (const auto& s : samples) {
        if (s.sensors() != m.sensors || s.length() != m.length) {
            throw Error(path + ": sample " + s.sample_id + " is " + std::to_string(s.sensors()) + "x" + std::to_string(s.length()) +
                        " but the model expects " + std::to_string(m.sensors) + "x" + std::to_string(m.length));
        }
    }
    return samples;
}

DatasetSplit load_split(const TrainConfig& c, bool need_train) {
    DatasetSplit d;
    if (need_train) {
        d.train = load_part(c.data.train, "train", c.model);
        d.validation = load_part(c.data.validation, "validation", c.model);
    }
    d.test = load_part(c.data.test, "test", c.model);
    return d;
}

struct Session {
    StagedOutputs out;
    RunManifest manifest;
};

/// Manifest is staged first so it lands before any result file.
Session begin_outputs(const Options& o, const std::string& command, const TrainConfig* config) {
    if (o.out.empty()) throw Error("--out is required");
    Session s{StagedOutputs(o.out), RunManifest{command, o.config, config ? to_json(*config) : json::object(), o.out, utc_timestamp(), ""}};
    s.out.file("manifest.json");
    return s;
}

void finish(Session& s) {
    s.manifest.finished = utc_timestamp();
    s.out.file("manifest.json") << s.manifest.to_json().dump(2) << '\n';
    for (const auto& p : s.out.commit()) std::cout << "wrote " << p.string() << '\n';
}

void write_records(std::ostream& os, const std::string& variant, const MetricsReport& r, std::optional<double> lambda = {}) {
    for (const auto& rec : metric_records(variant, r, lambda)) os << metric_record_line(rec) << '\n';
}

// ---------------------------------------------------------------------------

int cmd_prepare_data(const Options& o) {
    if (o.format != "synthetic" && o.format != "rul") throw Error("unknown format '" + o.format + "' (expected synthetic or rul)");
    auto session = begin_outputs(o, "prepare-data", nullptr);
    auto& out = session.out;
    json config;
    if (o.format == "synthetic") {
        SyntheticSpec spec;
        if (o.seed) spec.seed = *o.seed;
        auto corpus = make_synthetic(spec);
        write_samples(out.file("train.jsonl"), corpus.split.train);
        write_samples(out.file("validation.jsonl"), corpus.split.validation);
        write_samples(out.file("test.jsonl"), corpus.split.test);
        out.file("relations.json") << json{{"group_of", corpus.group_of}, {"relations", to_json(corpus.relations)}}.dump() << '\n';
        auto model = preset_config("synthetic");
        auto table = grouped_embedding_table(corpus.split.train[0].sensor_names, corpus.group_of, model.patches(), model.category_phrase,
                                             corpus.class_names, 11);
        std::vector<std::string> order;
        for (const auto& [prompt, vec] : table.entries) order.push_back(prompt);
        write_embedding_table(out.file("grouped_embeddings.jsonl"), table, order);
        config = {{"preset", "synthetic"},
                  {"data", {{"train", "train.jsonl"}, {"validation", "validation.jsonl"}, {"test", "test.jsonl"}}},
                  {"embeddings", {{"table", "grouped_embeddings.jsonl"}}},
                  {"train", {{"epochs", 40}, {"batch_size", 10}, {"learning_rate", 3e-3}, {"seeds", {0, 1, 2, 3, 4}}}}};
    } else {
        if (o.source.empty()) throw Error("--source is required for format rul");
        std::ifstream in(o.source);
        if (!in) throw Error("cannot open " + o.source);
        auto model = preset_config(o.preset);
        if (model.task != TaskKind::regression) throw Error("preset '" + o.preset + "' is not a RUL preset");
        auto raw = read_rul_raw(in);
        RulWindowing w{o.window ? o.window : model.length, o.stride, o.cap};
        std::vector<std::string> warnings;
        auto samples = ingest_rul_corpus(raw.units, w, raw.sensor_names, &warnings);
        for (const auto& msg : warnings) std::cerr << json{{"warning", msg}}.dump() << '\n';
        if (samples.empty()) throw Error(o.source + ": no unit is long enough for window " + std::to_string(w.window));
        auto split = split_by_subject(std::move(samples), o.ratios, o.seed.value_or(0));
        auto stats = compute_normalization(split.train);
        for (auto* part : {&split.train, &split.validation, &split.test}) minmax_normalize(*part, stats);
        write_samples(out.file("train.jsonl"), split.train);
        write_samples(out.file("validation.jsonl"), split.validation);
        write_samples(out.file("test.jsonl"), split.test);
        out.file("normalization.json") << to_json(stats).dump() << '\n';
        config = {{"preset", o.preset},
                  {"model", {{"length", w.window}}},
                  {"data", {{"train", "train.jsonl"}, {"validation", "validation.jsonl"}, {"test", "test.jsonl"}}},
                  {"embeddings", {{"fallback", true}}}};
        std::cout << "samples: train " << split.train.size() << ", validation " << split.validation.size() << ", test " << split.test.size()
                  << '\n';
    }
    out.file("config.json") << config.dump(2) << '\n';
    finish(session);
    return 0;
}

int cmd_emit_prompts(const Options& o) {
    auto c = resolve_config(o);
    const std::string path = o.data.empty() ? c.data.train : o.data;
    auto samples = load_part(path, "train", c.model);
    std::vector<std::string> prompts;
    std::set<std::string> seen;
    auto add = [&](const std::string& p) {
        if (seen.insert(p).second) prompts.push_back(p);
    };
    std::vector<PromptMode> modes{c.model.prompt_mode};
    if (o.index_prompts && c.model.prompt_mode != PromptMode::sensor_index) modes.push_back(PromptMode::sensor_index);
    for (auto mode : modes)
        for (const auto& s : samples) {
            auto ps = build_prompts(s.sensor_names, c.model.patches(), c.model.category_phrase,
                                    render_label(s.label, c.model.task, c.model.class_names), mode);
            for (const auto& row : ps.sensor_prompts)
                for (const auto& p : row) add(p);
        }
    for (const auto& s : samples) add(label_prompt(c.model.category_phrase, render_label(s.label, c.model.task, c.model.class_names)));
    if (o.out.empty()) throw Error("--out is required");
    StagedOutputs out(fs::path(o.out).parent_path().empty() ? fs::path(".") : fs::path(o.out).parent_path());
    auto& f = out.file(fs::path(o.out).filename().string());
    for (const auto& p : prompts) f << p << '\n';
    out.commit();
    std::cout << prompts.size() << " prompts -> " << o.out << '\n';
    return 0;
}

template <typename T>
int cmd_train(const Options& o, const TrainConfig& c) {
    auto data = load_split(c, true);
    std::vector<std::string> warnings;
    auto embedder = make_embedder(c.embeddings, c.model.text_dim, &warnings);
    for (const auto& msg : warnings) std::cerr << json{{"warning", msg}}.dump() << '\n';
    auto session = begin_outputs(o, "train", &c);
    auto& out = session.out;
    auto& history = out.file("history.jsonl");
    auto outcome = train<T>(c, data, embedder.get(), [&](const EpochLog& e) {
        json j{{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"improved", e.improved}};
        for (const auto& n : e.validation.names()) j["validation_" + n] = e.validation.get(n);
        history << j.dump() << '\n';
        std::cout << j.dump() << std::endl;
    });
    auto test = evaluate(*outcome.model, data.test, c.eval_batch_size);
    MetricsReport report;
    report.add(c.seed, test);
    write_records(out.file("metrics.jsonl"), c.variant, report);
    save_checkpoint(out.file("checkpoint.json"), *outcome.model, c, outcome.best_epoch, outcome.optimizer);
    if (embedder && embedder->table_misses() > 0) {
        std::cerr << json{{"warning", std::to_string(embedder->table_misses()) + " prompts missed the embedding table"}}.dump() << '\n';
    }
    out.file("summary.txt") << "best epoch " << outcome.best_epoch << "\n" << summary_table("variant", {{c.variant, report}});
    std::cout << summary_table("variant", {{c.variant, report}});
    finish(session);
    return 0;
}

template <typename T>
int cmd_eval(const Options& o) {
    if (o.checkpoint.empty()) throw Error("--checkpoint is required");
    auto loaded = load_checkpoint<T>(o.checkpoint);
    TrainConfig c = o.config.empty() ? loaded.config : resolve_config(o);
    if (config_hash(c.model) != config_hash(loaded.config.model)) {
        throw Error("checkpoint " + o.checkpoint + " was trained with a different model config");
    }
    std::string path = o.split == "test" ? c.data.test : o.split == "validation" ? c.data.validation : o.split == "train" ? c.data.train : "";
    if (path.empty() && o.split != "test" && o.split != "validation" && o.split != "train") throw Error("unknown split '" + o.split + "'");
    if (!o.data.empty()) path = o.data;
    auto samples = load_part(path, o.split.c_str(), loaded.model->config);
    auto m = evaluate(*loaded.model, samples, c.eval_batch_size);
    MetricsReport report;
    report.add(loaded.config.seed, m);
    auto session = begin_outputs(o, "eval", &c);
    auto& out = session.out;
    write_records(out.file("metrics.jsonl"), loaded.config.variant, report);
    std::cout << summary_table("variant", {{loaded.config.variant, report}});
    out.file("summary.txt") << summary_table("variant", {{loaded.config.variant, report}});
    finish(session);
    return 0;
}

template <typename T>
int cmd_ablate(const Options& o, const TrainConfig& c) {
    auto data = load_split(c, true);
    auto embedder = make_embedder(c.embeddings, c.model.text_dim);
    auto session = begin_outputs(o, "ablate", &c);
    auto& out = session.out;
    auto& records = out.file("metrics.jsonl");
    auto rows = run_ablation<T>(c, data, embedder.get(), ablation_variants(), [&](const RunRecord& r) {
        std::cout << r.variant << " seed " << r.seed << " best epoch " << r.best_epoch << std::endl;
    });
    for (const auto& [variant, report] : rows) write_records(records, variant, report);
    const auto table = summary_table("variant", rows);
    out.file("summary.txt") << table;
    std::cout << table;
    finish(session);
    return 0;
}

template <typename T>
int cmd_sweep(const Options& o, const TrainConfig& c) {
    if (o.lambda.size() != 1) throw Error("--lambda must be one of S, L, E");
    const char which = o.lambda[0];
    TrainConfig probe = c;
    lambda_ref(probe.loss, which);
    auto data = load_split(c, true);
    auto embedder = make_embedder(c.embeddings, c.model.text_dim);
    auto session = begin_outputs(o, "sweep", &c);
    auto& out = session.out;
    auto curve = sweep_lambda<T>(c, which, data, embedder.get(), lambda_grid(), [&](const RunRecord& r) {
        std::cout << "lambda_" << which << " " << r.lambda << " seed " << r.seed << " best epoch " << r.best_epoch << std::endl;
    });
    std::vector<std::pair<std::string, MetricsReport>> rows;
    auto& csv = out.file("curve.csv");
    const auto names = curve.front().second.names();
    csv << "lambda";
    for (const auto& n : names) csv << ',' << n << "_mean," << n << "_std";
    csv << '\n';
    for (const auto& [v, report] : curve) {
        write_records(out.file("metrics.jsonl"), c.variant, report, v);
        std::ostringstream label;
        label << v;
        rows.emplace_back(label.str(), report);
        csv << json(v).dump();
        for (const auto& n : names) csv << ',' << json(report.mean(n)).dump() << ',' << json(report.stddev(n)).dump();
        csv << '\n';
    }
    const auto table = summary_table(std::string("lambda_") + which, rows);
    out.file("summary.txt") << table;
    std::cout << table;
    finish(session);
    return 0;
}

/// Toy instance: N=3, two patches, batch 2, d_h=4, every loss term active.
int cmd_gradcheck(const Options& o) {
    int failures = 0;
    json results = json::array();
    for (auto task : {TaskKind::classification, TaskKind::regression}) {
        ModelConfig cfg;
        cfg.task = task;
        cfg.sensors = 3;
        cfg.length = 4;
        cfg.patch_size = 2;
        cfg.window = 2;
        cfg.encoder = {{1, 3}, 2, 4, {12, task == TaskKind::regression ? std::size_t{1} : std::size_t{2}}};
        cfg.class_names = task == TaskKind::regression ? std::vector<std::string>{} : std::vector<std::string>{"low", "high"};
        cfg.category_phrase = task == TaskKind::regression ? "remaining useful life of a machine" : "level";
        cfg.text_dim = 16;
        const std::uint64_t seed = o.seed.value_or(11);
        Rng rng(seed + 1);
        std::vector<MtsSample> samples(2);
        for (std::size_t k = 0; k < 2; ++k) {
            samples[k].signal = normal_tensor<double>(Shape{3, 4}, 1.0, rng);
            samples[k].label = task == TaskKind::regression ? 10.0 + 5.0 * double(k) : double(k);
            samples[k].sensor_names = {"fan speed", "core speed", "bypass ratio"};
            samples[k].sample_id = samples[k].subject = "s" + std::to_string(k);
        }
        std::vector<const MtsSample*> batch{&samples[0], &samples[1]};
        Embedder emb(std::nullopt, 3, cfg.text_dim);
        LossWeights w{0.5, 0.7, 0.9, 1.3};
        KLinkModel<double> model(cfg, seed);
        KLinkModel<long double> mirror(cfg, seed);
        auto r = finite_difference_check(
            [&](Graph<double>& g) { return model.forward(g, batch, true, w, &emb).total; }, model.parameters(),
            [&](Graph<long double>& g) { return mirror.forward(g, batch, true, w, &emb).total; }, mirror.parameters(), 1e-5L, 1e-4);
        std::cout << to_string(task) << ": max rel err " << r.max_rel_error << (r.passed ? " < " : " >= ") << r.tolerance << " over "
                  << r.entries_checked << " entries (worst " << r.worst_parameter << "[" << r.worst_index << "])" << std::endl;
        results.push_back({{"task", to_string(task)},
                           {"max_rel_error", r.max_rel_error},
                           {"tolerance", r.tolerance},
                           {"entries", r.entries_checked},
                           {"worst_parameter", r.worst_parameter},
                           {"worst_index", r.worst_index},
                           {"passed", r.passed}});
        failures += !r.passed;
    }
    if (!o.out.empty()) {
        auto session = begin_outputs(o, "gradcheck", nullptr);
        session.out.file("gradcheck.json") << results.dump(2) << '\n';
        finish(session);
    }
    if (failures) throw Error("gradient check failed");
    return 0;
}

template <template <typename> class Cmd>
int by_precision(const Options& o) {
    auto c = resolve_config(o);
    return c.precision == 32 ? Cmd<float>::run(o, c) : Cmd<double>::run(o, c);
}

template <typename T>
struct Train {
    static int run(const Options& o, const TrainConfig& c) { return cmd_train<T>(o, c); }
};
template <typename T>
struct Ablate {
    static int run(const Options& o, const TrainConfig& c) { return cmd_ablate<T>(o, c); }
};
template <typename T>
struct Sweep {
    static int run(const Options& o, const TrainConfig& c) { return cmd_sweep<T>(o, c); }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Graph learning for multivariate time series with prompt-embedding alignment"};
    app.require_subcommand(1);
    Options o;

    auto common = [&](CLI::App* sub, bool needs_config) {
        auto* cfg = sub->add_option("--config", o.config, "JSON config file");
        if (needs_config) cfg->required();
        sub->add_option("--out", o.out, "output directory");
        sub->add_option("--seed", o.seed, "override the seed (multi-seed commands run only this seed)");
        sub->add_option("--variant", o.variant, "ablation variant")->check(CLI::IsMember(ablation_variants()));
        sub->add_option("--embeddings", o.embeddings, "prompt embedding table");
        sub->add_flag("--fallback-embeddings", o.fallback, "use the deterministic fallback embedder for missing prompts");
    };

    auto* prepare = app.add_subcommand("prepare-data", "write sample files for a corpus");
    prepare->add_option("--format", o.format, "synthetic | rul")->required();
    prepare->add_option("--source", o.source, "raw run-to-failure table (rul)");
    prepare->add_option("--out", o.out, "output directory")->required();
    prepare->add_option("--seed", o.seed, "corpus / split seed");
    prepare->add_option("--preset", o.preset, "RUL preset (fd002, fd004)");
    prepare->add_option("--window", o.window, "window length L (default: preset length)");
    prepare->add_option("--stride", o.stride, "window stride S");
    prepare->add_option("--cap", o.cap, "piece-wise linear RUL cap");
    prepare->add_option("--ratios", o.ratios, "train validation test fractions")->expected(3);

    auto* prompts = app.add_subcommand("emit-prompts", "list every prompt the knowledge branch will embed");
    common(prompts, true);
    prompts->add_option("--data", o.data, "sample file (default: the config's training split)");
    prompts->add_flag("--index-prompts", o.index_prompts, "also list sensor-index prompts");

    auto* train_cmd = app.add_subcommand("train", "train one seed and evaluate on the test split");
    common(train_cmd, true);
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    common(eval_cmd, false);
    eval_cmd->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
    eval_cmd->add_option("--split", o.split, "train | validation | test");
    eval_cmd->add_option("--data", o.data, "sample file overriding the split");
    auto* ablate = app.add_subcommand("ablate", "full model and the six ablation variants over all seeds");
    common(ablate, true);
    auto* sweep = app.add_subcommand("sweep", "sweep one alignment weight over the grid");
    common(sweep, true);
    sweep->add_option("--lambda", o.lambda, "S | L | E")->required()->check(CLI::IsMember({"S", "L", "E"}));
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the combined loss on a toy instance");
    gradcheck->add_option("--out", o.out, "output directory for gradcheck.json");
    gradcheck->add_option("--seed", o.seed, "model seed");

    std::string command = "klink";
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        emit_error(command, e.what());
        return e.get_exit_code() ? e.get_exit_code() : 1;
    }

    try {
        if (prepare->parsed()) return cmd_prepare_data(o);
        if (prompts->parsed()) return cmd_emit_prompts(o);
        if (train_cmd->parsed()) return by_precision<Train>(o);
        if (eval_cmd->parsed()) {
            const int bits = checkpoint_precision(o.checkpoint);
            return bits == 32 ? cmd_eval<float>(o) : cmd_eval<double>(o);
        }
        if (ablate->parsed()) return by_precision<Ablate>(o);
        if (sweep->parsed()) return by_precision<Sweep>(o);
        if (gradcheck->parsed()) return cmd_gradcheck(o);
    } catch (const std::exception& e) {
        for (auto* sub : app.get_subcommands()) command = sub->get_name();
        return emit_error(command, e.what());
    }
    return 0;
}
