// Experiment front end: JSON configs with preset inheritance, the
// generate/run/ablate/eval commands, result files (manifests, run records,
// evaluation reports, aggregate tables), and optional SVG sweep charts.
// Everything written here is a deterministic function of (config, seeds).
#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "gap/context.hpp"
#include "gap/datagen.hpp"
#include "gap/evalreport.hpp"
#include "gap/mlp.hpp"
#include "gap/prior.hpp"
#include "gap/trainer.hpp"

namespace gap {

inline constexpr const char* kToolVersion = "0.1.0";

/// One finetuning stage: prior hyperparameters plus its optimizer settings.
struct StageConfig {
    GapConfig gap;
    TrainConfig train;
};

struct ExperimentConfig {
    std::string name = "custom";
    ShiftSpec dataset;
    std::string dataset_dir;  // when set, CSVs are loaded instead of generated
    std::uint64_t data_seed = 7;
    MlpSpec model;
    TrainConfig erm;
    StageConfig gap_last_layer;
    StageConfig gap_all_layers;
    bool run_last_layer = true;
    bool run_all_layers = true;
    std::size_t n_seeds = 10;
    std::uint64_t seed_base = 100;
    std::string output_dir = "out";

    void validate() const {
        if (dataset_dir.empty()) {
            dataset.validate();
            model.validate();
            if (model.layer_sizes.front() != dataset.feature_dim())
                throw std::invalid_argument("config: model input dim must equal feature dim");
            if (model.layer_sizes.back() != dataset.num_classes)
                throw std::invalid_argument("config: model output dim must equal class count");
        }
        erm.validate();
        gap_last_layer.gap.validate();
        gap_last_layer.train.validate();
        gap_all_layers.gap.validate();
        gap_all_layers.train.validate();
        if (n_seeds == 0) throw std::invalid_argument("config: n_seeds must be >= 1");
    }
};

// --------------------------------------------------------------------------
// JSON round-trips.
// --------------------------------------------------------------------------

inline nlohmann::json to_json(const ShiftSpec& s) {
    return {{"train_group_proportions", s.train_group_proportions},
            {"test_group_proportions", s.test_group_proportions},
            {"core_separation", s.core_separation},
            {"spurious_separation", s.spurious_separation},
            {"noise_sd", s.noise_sd},
            {"n_train", s.n_train},
            {"n_val", s.n_val},
            {"n_test", s.n_test},
            {"core_dim", s.core_dim},
            {"spurious_dim", s.spurious_dim},
            {"num_classes", s.num_classes},
            {"num_attributes", s.num_attributes}};
}

inline ShiftSpec shift_spec_from_json(const nlohmann::json& j) {
    ShiftSpec s;
    s.train_group_proportions =
        j.value("train_group_proportions", s.train_group_proportions);
    s.test_group_proportions = j.value("test_group_proportions", s.test_group_proportions);
    s.core_separation = j.value("core_separation", s.core_separation);
    s.spurious_separation = j.value("spurious_separation", s.spurious_separation);
    s.noise_sd = j.value("noise_sd", s.noise_sd);
    s.n_train = j.value("n_train", s.n_train);
    s.n_val = j.value("n_val", s.n_val);
    s.n_test = j.value("n_test", s.n_test);
    s.core_dim = j.value("core_dim", s.core_dim);
    s.spurious_dim = j.value("spurious_dim", s.spurious_dim);
    s.num_classes = j.value("num_classes", s.num_classes);
    s.num_attributes = j.value("num_attributes", s.num_attributes);
    return s;
}

inline nlohmann::json to_json(const MlpSpec& m) {
    return {{"layer_sizes", m.layer_sizes},
            {"activation", m.activation == Nonlinearity::relu ? "relu" : "tanh"}};
}

inline MlpSpec mlp_spec_from_json(const nlohmann::json& j) {
    MlpSpec m;
    m.layer_sizes = j.value("layer_sizes", std::vector<std::size_t>{});
    const std::string act = j.value("activation", "relu");
    if (act == "relu") {
        m.activation = Nonlinearity::relu;
    } else if (act == "tanh") {
        m.activation = Nonlinearity::tanh;
    } else {
        throw std::invalid_argument("config: unknown activation: " + act);
    }
    return m;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
    base.epochs = j.value("epochs", base.epochs);
    base.initial_lr = j.value("initial_lr", base.initial_lr);
    if (j.contains("schedule")) base.schedule = schedule_from_string(j.at("schedule"));
    base.alpha_min = j.value("alpha_min", base.alpha_min);
    base.momentum = j.value("momentum", base.momentum);
    base.batch_size = j.value("batch_size", base.batch_size);
    base.weight_decay = j.value("weight_decay", base.weight_decay);
    if (j.contains("mode")) base.mode = mode_from_string(j.at("mode"));
    return base;
}

inline nlohmann::json to_json(const GapConfig& c) {
    return {{"lambda", c.lambda},
            {"rho", c.rho},
            {"tau", c.tau},
            {"gamma", c.gamma},
            {"context_batch_size", c.context_batch_size},
            {"prior_mean_source",
             c.prior_mean_source == PriorMeanSource::erm_checkpoint ? "erm_checkpoint" : "zeros"},
            {"data_fit_source",
             c.data_fit_source == DataFitSource::context ? "context" : "train"},
            {"context_scheme",
             c.context_scheme == ContextScheme::upsample ? "upsample" : "mixture"}};
}

inline GapConfig gap_config_from_json(const nlohmann::json& j, GapConfig base = {}) {
    base.lambda = j.value("lambda", base.lambda);
    base.rho = j.value("rho", base.rho);
    base.tau = j.value("tau", base.tau);
    base.gamma = j.value("gamma", base.gamma);
    base.context_batch_size = j.value("context_batch_size", base.context_batch_size);
    if (j.contains("prior_mean_source")) {
        const std::string s = j.at("prior_mean_source");
        if (s == "erm_checkpoint") base.prior_mean_source = PriorMeanSource::erm_checkpoint;
        else if (s == "zeros") base.prior_mean_source = PriorMeanSource::zeros;
        else throw std::invalid_argument("config: unknown prior_mean_source: " + s);
    }
    if (j.contains("data_fit_source")) {
        const std::string s = j.at("data_fit_source");
        if (s == "context") base.data_fit_source = DataFitSource::context;
        else if (s == "train") base.data_fit_source = DataFitSource::train;
        else throw std::invalid_argument("config: unknown data_fit_source: " + s);
    }
    if (j.contains("context_scheme")) {
        const std::string s = j.at("context_scheme");
        if (s == "upsample") base.context_scheme = ContextScheme::upsample;
        else if (s == "mixture") base.context_scheme = ContextScheme::mixture;
        else throw std::invalid_argument("config: unknown context_scheme: " + s);
    }
    return base;
}

inline nlohmann::json to_json(const StageConfig& s) {
    nlohmann::json j = to_json(s.gap);
    j["train"] = to_json(s.train);
    return j;
}

inline StageConfig stage_config_from_json(const nlohmann::json& j, StageConfig base = {}) {
    base.gap = gap_config_from_json(j, base.gap);
    if (j.contains("train")) base.train = train_config_from_json(j.at("train"), base.train);
    return base;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
    return {{"name", c.name},
            {"dataset", to_json(c.dataset)},
            {"dataset_dir", c.dataset_dir},
            {"data_seed", c.data_seed},
            {"model", to_json(c.model)},
            {"erm", to_json(c.erm)},
            {"gap_last_layer", to_json(c.gap_last_layer)},
            {"gap_all_layers", to_json(c.gap_all_layers)},
            {"run_last_layer", c.run_last_layer},
            {"run_all_layers", c.run_all_layers},
            {"n_seeds", c.n_seeds},
            {"seed_base", c.seed_base},
            {"output_dir", c.output_dir}};
}

// --------------------------------------------------------------------------
// Presets. Desk-scale tasks mirroring the canonical benchmark proportions;
// hyperparameters were calibrated by pilot runs on this code base.
// --------------------------------------------------------------------------

inline nlohmann::json preset_json(const std::string& name);

inline std::vector<std::string> preset_names() {
    return {"waterbirds-like", "celeba-like", "multinli-like"};
}

inline ExperimentConfig config_from_json(nlohmann::json j) {
    if (j.contains("preset")) {
        const std::string preset = j.at("preset");
        nlohmann::json base = preset_json(preset);
        j.erase("preset");
        base.merge_patch(j);
        j = std::move(base);
    }
    ExperimentConfig c;
    c.name = j.value("name", c.name);
    if (j.contains("dataset")) c.dataset = shift_spec_from_json(j.at("dataset"));
    c.dataset_dir = j.value("dataset_dir", c.dataset_dir);
    c.data_seed = j.value("data_seed", c.data_seed);
    if (j.contains("model")) c.model = mlp_spec_from_json(j.at("model"));
    if (j.contains("erm")) c.erm = train_config_from_json(j.at("erm"), c.erm);
    if (j.contains("gap_last_layer"))
        c.gap_last_layer = stage_config_from_json(j.at("gap_last_layer"), c.gap_last_layer);
    if (j.contains("gap_all_layers"))
        c.gap_all_layers = stage_config_from_json(j.at("gap_all_layers"), c.gap_all_layers);
    c.run_last_layer = j.value("run_last_layer", c.run_last_layer);
    c.run_all_layers = j.value("run_all_layers", c.run_all_layers);
    c.n_seeds = j.value("n_seeds", c.n_seeds);
    c.seed_base = j.value("seed_base", c.seed_base);
    c.output_dir = j.value("output_dir", c.output_dir);
    return c;
}

inline ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open: " + path);
    nlohmann::json j;
    in >> j;
    return config_from_json(std::move(j));
}

inline nlohmann::json preset_json(const std::string& name) {
    const auto train_cfg = [](int epochs, double lr, const char* sched, double alpha) {
        return nlohmann::json{{"epochs", epochs},      {"initial_lr", lr},
                              {"schedule", sched},     {"alpha_min", alpha},
                              {"momentum", 0.9},       {"batch_size", 128},
                              {"weight_decay", 0.0}};
    };
    const auto stage = [&](double lambda, double rho, double tau, double gamma,
                           nlohmann::json train) {
        return nlohmann::json{{"lambda", lambda},
                              {"rho", rho},
                              {"tau", tau},
                              {"gamma", gamma},
                              {"context_batch_size", 128},
                              {"prior_mean_source", "erm_checkpoint"},
                              {"data_fit_source", "context"},
                              {"context_scheme", "upsample"},
                              {"train", std::move(train)}};
    };

    if (name == "waterbirds-like") {
        return {{"name", "waterbirds-like"},
                {"dataset",
                 {{"train_group_proportions", {0.22, 0.01, 0.04, 0.73}},
                  {"test_group_proportions", {0.25, 0.25, 0.25, 0.25}},
                  {"core_separation", 1.0},
                  {"spurious_separation", 2.0},
                  {"noise_sd", 1.0},
                  {"n_train", 5000},
                  {"n_val", 1200},
                  {"n_test", 4000},
                  {"core_dim", 2},
                  {"spurious_dim", 8},
                  {"num_classes", 2},
                  {"num_attributes", 2}}},
                {"data_seed", 7},
                {"model", {{"layer_sizes", {10, 32, 32, 2}}, {"activation", "relu"}}},
                {"erm", train_cfg(100, 0.05, "cosine", 0.01)},
                {"gap_last_layer", stage(1.0, 0.15, 0.1, 4.0, train_cfg(100, 0.01, "cosine", 1.0))},
                {"gap_all_layers", stage(1.0, 0.15, 0.1, 4.0, train_cfg(100, 0.01, "linear", 0.0))},
                {"n_seeds", 10},
                {"seed_base", 100},
                {"output_dir", "out/waterbirds-like"}};
    }
    if (name == "celeba-like") {
        return {{"name", "celeba-like"},
                {"dataset",
                 {{"train_group_proportions", {0.44, 0.41, 0.14, 0.01}},
                  {"test_group_proportions", {0.25, 0.25, 0.25, 0.25}},
                  {"core_separation", 1.0},
                  {"spurious_separation", 2.0},
                  {"noise_sd", 1.0},
                  {"n_train", 5000},
                  {"n_val", 1200},
                  {"n_test", 4000},
                  {"core_dim", 2},
                  {"spurious_dim", 8},
                  {"num_classes", 2},
                  {"num_attributes", 2}}},
                {"data_seed", 11},
                {"model", {{"layer_sizes", {10, 32, 32, 2}}, {"activation", "relu"}}},
                {"erm", train_cfg(100, 0.05, "cosine", 0.01)},
                {"gap_last_layer", stage(2.0, 0.15, 0.1, 1.5, train_cfg(100, 0.01, "cosine", 1.0))},
                {"gap_all_layers", stage(2.0, 0.1, 0.1, 4.0, train_cfg(100, 0.01, "linear", 0.0))},
                {"n_seeds", 10},
                {"seed_base", 100},
                {"output_dir", "out/celeba-like"}};
    }
    if (name == "multinli-like") {
        return {{"name", "multinli-like"},
                {"dataset",
                 {{"train_group_proportions",
                   {57498.0 / 206175.0, 11158.0 / 206175.0, 67376.0 / 206175.0,
                    1521.0 / 206175.0, 66630.0 / 206175.0, 1992.0 / 206175.0}},
                  {"test_group_proportions",
                   {1.0 / 6, 1.0 / 6, 1.0 / 6, 1.0 / 6, 1.0 / 6, 1.0 / 6}},
                  {"core_separation", 1.0},
                  {"spurious_separation", 2.0},
                  {"noise_sd", 1.0},
                  {"n_train", 6000},
                  {"n_val", 1500},
                  {"n_test", 4200},
                  {"core_dim", 2},
                  {"spurious_dim", 8},
                  {"num_classes", 3},
                  {"num_attributes", 2}}},
                {"data_seed", 13},
                {"model", {{"layer_sizes", {10, 32, 32, 3}}, {"activation", "relu"}}},
                {"erm", train_cfg(100, 0.05, "linear", 0.0)},
                {"gap_last_layer", stage(2.0, 0.1, 0.1, 2.0, train_cfg(100, 0.01, "linear", 0.0))},
                {"gap_all_layers", stage(2.0, 0.1, 0.1, 4.0, train_cfg(100, 0.01, "linear", 0.0))},
                {"n_seeds", 10},
                {"seed_base", 100},
                {"output_dir", "out/multinli-like"}};
    }
    throw std::invalid_argument("unknown preset: " + name);
}

// --------------------------------------------------------------------------
// Shared plumbing.
// --------------------------------------------------------------------------

namespace detail {

inline std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out << content;
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline std::uint64_t resolved_seed_base(const ExperimentConfig& cfg) {
    if (const char* env = std::getenv("GAP_SEED_BASE")) {
        char* end = nullptr;
        const auto v = std::strtoull(env, &end, 10);
        if (end == env || *end != '\0')
            throw std::invalid_argument("GAP_SEED_BASE is not an unsigned integer");
        return v;
    }
    return cfg.seed_base;
}

}  // namespace detail

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json per_group, counts;
    for (const auto& [g, a] : r.per_group_acc) per_group[std::to_string(g)] = a;
    for (const auto& [g, c] : r.group_counts_test) counts[std::to_string(g)] = c;
    nlohmann::json j = {{"method", r.method},
                        {"seed", r.seed},
                        {"per_group_acc", per_group},
                        {"worst_group_acc", r.worst_group_acc},
                        {"overall_acc", r.overall_acc},
                        {"group_counts_test", counts},
                        {"train_proportions", r.train_proportions},
                        {"in_sample", r.in_sample}};
    j["weighted_avg_acc"] =
        std::isnan(r.weighted_avg_acc) ? nlohmann::json() : nlohmann::json(r.weighted_avg_acc);
    return j;
}

inline constexpr const char* kReportCsvHeader = "method,seed,group,acc,wga,avg\n";

inline void append_report_csv(std::string& csv, const EvalReport& r) {
    for (const auto& [g, a] : r.per_group_acc) {
        csv += r.method;
        csv += ',';
        csv += std::to_string(r.seed);
        csv += ',';
        csv += std::to_string(g);
        csv += ',';
        csv += detail::fmt17(a);
        csv += ',';
        csv += detail::fmt17(r.worst_group_acc);
        csv += ',';
        csv += detail::fmt17(r.weighted_avg_acc);
        csv += '\n';
    }
}

/// Resolves the experiment's data: loads CSVs from dataset_dir when set,
/// otherwise generates the synthetic splits from the spec and data seed.
/// Returns the splits plus the train proportions used for reweighting.
inline std::pair<DatasetSplits, std::vector<double>> resolve_data(const ExperimentConfig& cfg) {
    DatasetSplits splits;
    std::vector<double> proportions;
    if (!cfg.dataset_dir.empty()) {
        const std::filesystem::path dir = cfg.dataset_dir;
        splits.train = load_csv((dir / "train.csv").string());
        splits.val_context = load_csv((dir / "val_context.csv").string());
        splits.val_tune = load_csv((dir / "val_tune.csv").string());
        splits.test = load_csv((dir / "test.csv").string());
        std::ifstream mf(dir / "manifest.json");
        if (mf) {
            nlohmann::json j;
            mf >> j;
            if (j.contains("dataset"))
                proportions = j["dataset"].value("train_group_proportions", proportions);
        }
        if (proportions.empty()) {
            // fall back to the empirical training proportions
            int max_g = 0;
            for (const auto& [g, c] : splits.train.group_counts) max_g = std::max(max_g, g);
            proportions.assign(static_cast<std::size_t>(max_g) + 1, 0.0);
            for (const auto& [g, c] : splits.train.group_counts)
                proportions[static_cast<std::size_t>(g)] =
                    static_cast<double>(c) / static_cast<double>(splits.train.size());
        }
    } else {
        splits = make_spurious_gaussian(cfg.dataset, cfg.data_seed);
        proportions = cfg.dataset.train_group_proportions;
    }
    return {std::move(splits), std::move(proportions)};
}

// --------------------------------------------------------------------------
// generate
// --------------------------------------------------------------------------

inline int cmd_generate(const ExperimentConfig& cfg, const std::string& out_dir) {
    cfg.dataset.validate();
    const auto splits = make_spurious_gaussian(cfg.dataset, cfg.data_seed);
    const std::filesystem::path dir = out_dir;
    std::filesystem::create_directories(dir);
    save_csv(splits.train, (dir / "train.csv").string());
    save_csv(splits.val_context, (dir / "val_context.csv").string());
    save_csv(splits.val_tune, (dir / "val_tune.csv").string());
    save_csv(splits.test, (dir / "test.csv").string());
    nlohmann::json manifest = {{"tool_version", kToolVersion},
                               {"dataset", to_json(cfg.dataset)},
                               {"data_seed", cfg.data_seed},
                               {"name", cfg.name}};
    detail::write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
    std::cout << "wrote " << (dir / "train.csv").string() << " and 3 more splits\n";
    return 0;
}

// --------------------------------------------------------------------------
// run
// --------------------------------------------------------------------------

struct MethodResult {
    RunRecord record;
    EvalReport report;
    ParamVector params;
};

struct PipelineOutcome {
    MethodResult erm;
    std::optional<MethodResult> gap_last;
    std::optional<MethodResult> gap_all;
};

/// ERM, then the requested GAP stages, for one training seed.
inline PipelineOutcome run_pipeline_for_seed(const ExperimentConfig& cfg,
                                             const DatasetSplits& data,
                                             std::span<const double> proportions,
                                             std::uint64_t seed) {
    PipelineOutcome out;
    TrainConfig erm_cfg = cfg.erm;
    erm_cfg.seed = seed;
    erm_cfg.mode = Mode::all_layers;
    auto erm = train_erm(cfg.model, data.train, erm_cfg, nullptr, &data.val_tune);
    out.erm.report = evaluate(erm.params, cfg.model, data.test, proportions, "erm", seed);
    out.erm.record = std::move(erm.record);
    out.erm.params = std::move(erm.params);

    const auto finetune = [&](const StageConfig& stage, Mode mode, const std::string& method) {
        TrainConfig c = stage.train;
        c.seed = seed;
        c.mode = mode;
        auto ft = finetune_gap(out.erm.params, cfg.model, data.val_context, stage.gap, c,
                               &data.train, &data.val_tune);
        MethodResult r;
        r.report = evaluate(ft.params, cfg.model, data.test, proportions, method, seed);
        r.record = std::move(ft.record);
        r.params = std::move(ft.params);
        return r;
    };
    if (cfg.run_last_layer)
        out.gap_last = finetune(cfg.gap_last_layer, Mode::last_layer, "gap_last_layer");
    if (cfg.run_all_layers)
        out.gap_all = finetune(cfg.gap_all_layers, Mode::all_layers, "gap_all_layers");
    return out;
}

inline std::string aggregate_csv(
    const std::vector<std::pair<std::string, AggregateSummary>>& rows) {
    std::string csv = "method,worst,average,worst_se,average_se\n";
    for (const auto& [method, agg] : rows) {
        csv += method;
        csv += ',';
        csv += detail::fmt17(agg.worst.mean);
        csv += ',';
        csv += detail::fmt17(agg.average.mean);
        csv += ',';
        csv += detail::fmt17(agg.worst.se);
        csv += ',';
        csv += detail::fmt17(agg.average.se);
        csv += '\n';
    }
    return csv;
}

inline int cmd_run(const ExperimentConfig& cfg, const std::string& out_dir, int jobs = 1,
                   bool dry_run = false) {
    cfg.validate();
    if (dry_run) {
        nlohmann::json j = to_json(cfg);
        j["seed_base"] = detail::resolved_seed_base(cfg);
        std::cout << j.dump(2) << "\n";
        return 0;
    }
    const std::uint64_t seed_base = detail::resolved_seed_base(cfg);
    auto [data, proportions] = resolve_data(cfg);

    const auto outcomes = run_seeds(cfg.n_seeds, seed_base, jobs, [&](std::uint64_t seed) {
        return run_pipeline_for_seed(cfg, data, proportions, seed);
    });

    const std::filesystem::path dir = out_dir;
    std::filesystem::create_directories(dir / "records");
    std::filesystem::create_directories(dir / "reports");
    std::filesystem::create_directories(dir / "checkpoints");

    std::vector<std::uint64_t> seeds;
    for (const auto& o : outcomes) seeds.push_back(o.seed);
    nlohmann::json manifest = {{"tool_version", kToolVersion},
                               {"config", to_json(cfg)},
                               {"seed_base", seed_base},
                               {"seeds", seeds}};
    detail::write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");

    std::map<std::string, std::vector<EvalReport>> by_method;
    std::string reports_csv = kReportCsvHeader;
    std::size_t failures = 0;
    nlohmann::json errors = nlohmann::json::array();
    for (const auto& o : outcomes) {
        if (!o.ok()) {
            ++failures;
            errors.push_back({{"seed", o.seed}, {"error", o.error}});
            std::cerr << "seed " << o.seed << " failed: " << o.error << "\n";
            continue;
        }
        const auto save_method = [&](const MethodResult& m) {
            const std::string tag = m.report.method + "_seed" + std::to_string(o.seed);
            RunRecord record = m.record;
            const auto ckpt = dir / "checkpoints" / (tag + ".gapckpt");
            save_checkpoint(m.params, cfg.model, ckpt.string());
            record.checkpoint_path = ckpt.string();
            detail::write_text_file(dir / "records" / (tag + ".json"),
                                    to_json(record).dump(2) + "\n");
            detail::write_text_file(dir / "reports" / (tag + ".json"),
                                    to_json(m.report).dump(2) + "\n");
            append_report_csv(reports_csv, m.report);
            by_method[m.report.method].push_back(m.report);
        };
        save_method(o.result->erm);
        if (o.result->gap_last) save_method(*o.result->gap_last);
        if (o.result->gap_all) save_method(*o.result->gap_all);
    }
    if (!errors.empty())
        detail::write_text_file(dir / "errors.json", errors.dump(2) + "\n");
    detail::write_text_file(dir / "reports.csv", reports_csv);

    std::vector<std::pair<std::string, AggregateSummary>> rows;
    for (const char* method : {"erm", "gap_last_layer", "gap_all_layers"}) {
        const auto it = by_method.find(method);
        if (it != by_method.end()) rows.emplace_back(method, aggregate(it->second));
    }
    const std::string agg = aggregate_csv(rows);
    detail::write_text_file(dir / "aggregate.csv", agg);
    std::cout << agg;
    return failures == 0 ? 0 : 1;
}

// --------------------------------------------------------------------------
// ablate
// --------------------------------------------------------------------------

enum class AblateAxis { rho, gamma };

inline AblateAxis ablate_axis_from_string(const std::string& s) {
    if (s == "rho") return AblateAxis::rho;
    if (s == "gamma") return AblateAxis::gamma;
    throw std::invalid_argument("unknown ablation axis: " + s);
}

struct SweepRow {
    double value = 0.0;
    AggregateSummary summary;
};

inline void write_sweep_svg(const std::filesystem::path& path, const std::string& axis_name,
                            std::span<const SweepRow> rows) {
    const double width = 640, height = 400, ml = 70, mr = 20, mt = 30, mb = 50;
    double lo = 1.0, hi = 0.0;
    for (const auto& r : rows) {
        lo = std::min({lo, r.summary.worst.mean - r.summary.worst.se,
                       r.summary.average.mean - r.summary.average.se});
        hi = std::max({hi, r.summary.worst.mean + r.summary.worst.se,
                       r.summary.average.mean + r.summary.average.se});
    }
    const double pad = std::max(0.02, (hi - lo) * 0.1);
    lo = std::max(0.0, lo - pad);
    hi = std::min(1.0, hi + pad);
    const auto xpos = [&](std::size_t i) {
        return rows.size() == 1 ? ml + (width - ml - mr) / 2
                                : ml + (width - ml - mr) * static_cast<double>(i) /
                                           static_cast<double>(rows.size() - 1);
    };
    const auto ypos = [&](double v) { return height - mb - (height - mt - mb) * (v - lo) / (hi - lo); };
    const auto f = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.6g", v);
        return std::string(buf);
    };

    std::string svg;
    svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + f(width) + "\" height=\"" +
           f(height) + "\" viewBox=\"0 0 " + f(width) + " " + f(height) + "\">\n";
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg += "<line x1=\"" + f(ml) + "\" y1=\"" + f(height - mb) + "\" x2=\"" + f(width - mr) +
           "\" y2=\"" + f(height - mb) + "\" stroke=\"black\"/>\n";
    svg += "<line x1=\"" + f(ml) + "\" y1=\"" + f(mt) + "\" x2=\"" + f(ml) + "\" y2=\"" +
           f(height - mb) + "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        const double v = lo + (hi - lo) * t / 4.0;
        svg += "<text x=\"" + f(ml - 8) + "\" y=\"" + f(ypos(v) + 4) +
               "\" text-anchor=\"end\" font-size=\"12\">" + f(v) + "</text>\n";
    }
    const auto series = [&](bool worst, const char* color) {
        std::string pts;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const auto& m = worst ? rows[i].summary.worst : rows[i].summary.average;
            pts += f(xpos(i)) + "," + f(ypos(m.mean)) + " ";
            svg += "<line x1=\"" + f(xpos(i)) + "\" y1=\"" + f(ypos(m.mean - m.se)) + "\" x2=\"" +
                   f(xpos(i)) + "\" y2=\"" + f(ypos(m.mean + m.se)) + "\" stroke=\"" + color +
                   "\"/>\n";
            svg += "<circle cx=\"" + f(xpos(i)) + "\" cy=\"" + f(ypos(m.mean)) +
                   "\" r=\"3\" fill=\"" + color + "\"/>\n";
        }
        svg += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + std::string(color) +
               "\" stroke-width=\"1.5\"/>\n";
    };
    series(true, "#c0392b");
    series(false, "#2980b9");
    for (std::size_t i = 0; i < rows.size(); ++i)
        svg += "<text x=\"" + f(xpos(i)) + "\" y=\"" + f(height - mb + 18) +
               "\" text-anchor=\"middle\" font-size=\"12\">" + f(rows[i].value) + "</text>\n";
    svg += "<text x=\"" + f((ml + width - mr) / 2) + "\" y=\"" + f(height - 10) +
           "\" text-anchor=\"middle\" font-size=\"13\">" + axis_name + "</text>\n";
    svg += "<text x=\"" + f(width - mr - 160) + "\" y=\"" + f(mt) +
           "\" font-size=\"12\" fill=\"#c0392b\">worst-group accuracy</text>\n";
    svg += "<text x=\"" + f(width - mr - 160) + "\" y=\"" + f(mt + 16) +
           "\" font-size=\"12\" fill=\"#2980b9\">weighted average</text>\n";
    svg += "</svg>\n";
    detail::write_text_file(path, svg);
}

/// Sweeps the GAP last-layer stage along rho or gamma, holding everything
/// else (data, ERM stage, seeds) fixed.
inline int cmd_ablate(const ExperimentConfig& cfg, AblateAxis axis,
                      std::span<const double> values, const std::string& out_dir, int jobs = 1,
                      bool plot = false) {
    cfg.validate();
    if (values.empty()) throw std::invalid_argument("cmd_ablate: no values");
    const std::uint64_t seed_base = detail::resolved_seed_base(cfg);
    auto [data, proportions] = resolve_data(cfg);

    struct PerSeed {
        std::vector<EvalReport> per_value;
    };
    const auto outcomes = run_seeds(cfg.n_seeds, seed_base, jobs, [&](std::uint64_t seed) {
        TrainConfig erm_cfg = cfg.erm;
        erm_cfg.seed = seed;
        auto erm = train_erm(cfg.model, data.train, erm_cfg);
        PerSeed ps;
        for (const double v : values) {
            StageConfig stage = cfg.gap_last_layer;
            if (axis == AblateAxis::rho) stage.gap.rho = v;
            else stage.gap.gamma = v;
            TrainConfig c = stage.train;
            c.seed = seed;
            c.mode = Mode::last_layer;
            auto ft = finetune_gap(erm.params, cfg.model, data.val_context, stage.gap, c,
                                   &data.train, nullptr);
            ps.per_value.push_back(evaluate(ft.params, cfg.model, data.test, proportions,
                                            "gap_last_layer", seed));
        }
        return ps;
    });

    std::size_t failures = 0;
    std::vector<SweepRow> rows;
    for (std::size_t vi = 0; vi < values.size(); ++vi) {
        std::vector<EvalReport> reports;
        for (const auto& o : outcomes) {
            if (!o.ok()) continue;
            reports.push_back(o.result->per_value[vi]);
        }
        if (reports.empty()) continue;
        rows.push_back({values[vi], aggregate(reports)});
    }
    for (const auto& o : outcomes)
        if (!o.ok()) {
            ++failures;
            std::cerr << "seed " << o.seed << " failed: " << o.error << "\n";
        }

    const char* axis_name = axis == AblateAxis::rho ? "rho" : "gamma";
    std::string csv = std::string(axis_name) + ",wga_mean,wga_se,avg_mean,avg_se\n";
    for (const auto& r : rows) {
        csv += detail::fmt17(r.value);
        csv += ',';
        csv += detail::fmt17(r.summary.worst.mean);
        csv += ',';
        csv += detail::fmt17(r.summary.worst.se);
        csv += ',';
        csv += detail::fmt17(r.summary.average.mean);
        csv += ',';
        csv += detail::fmt17(r.summary.average.se);
        csv += '\n';
    }
    const std::filesystem::path dir = out_dir;
    std::filesystem::create_directories(dir);
    detail::write_text_file(dir / "sweep.csv", csv);
    nlohmann::json manifest = {{"tool_version", kToolVersion},
                               {"config", to_json(cfg)},
                               {"axis", axis_name},
                               {"values", std::vector<double>(values.begin(), values.end())},
                               {"seed_base", seed_base}};
    detail::write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
    if (plot) write_sweep_svg(dir / "sweep.svg", axis_name, rows);
    std::cout << csv;
    return failures == 0 ? 0 : 1;
}

// --------------------------------------------------------------------------
// eval
// --------------------------------------------------------------------------

inline int cmd_eval(const std::string& checkpoint_path, const std::string& dataset_path,
                    const std::string& out_path = "") {
    for (const auto& p : {checkpoint_path, dataset_path}) {
        if (!std::filesystem::exists(p)) {
            std::cerr << "missing file: " << p << "\n";
            return 2;
        }
    }
    auto [params, spec] = load_checkpoint(checkpoint_path);
    const auto data = load_csv(dataset_path);
    if (data.empty()) {
        std::cerr << "dataset is empty: " << dataset_path << "\n";
        return 1;
    }
    if (data.feature_dim != spec.input_dim()) {
        std::cerr << "checkpoint expects input dim " << spec.input_dim() << " but dataset has "
                  << data.feature_dim << "\n";
        return 1;
    }
    // Train proportions from a manifest next to the dataset, when present.
    std::vector<double> proportions;
    const auto manifest_path = std::filesystem::path(dataset_path).parent_path() / "manifest.json";
    if (std::filesystem::exists(manifest_path)) {
        std::ifstream mf(manifest_path);
        nlohmann::json j;
        mf >> j;
        if (j.contains("dataset"))
            proportions = j["dataset"].value("train_group_proportions", proportions);
    }
    const auto report = evaluate(params, spec, data, proportions, "eval", 0);
    const auto j = to_json(report);
    if (!out_path.empty()) {
        detail::write_text_file(out_path, j.dump(2) + "\n");
        std::string csv = kReportCsvHeader;
        append_report_csv(csv, report);
        const auto csv_path = std::filesystem::path(out_path).replace_extension(".csv");
        detail::write_text_file(csv_path, csv);
    }
    std::cout << j.dump(2) << "\n";
    return 0;
}

}  // namespace gap
