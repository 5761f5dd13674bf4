#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "gap/experiment.hpp"

using namespace gap;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// a deliberately tiny experiment so command tests run in milliseconds
ExperimentConfig tiny_config() {
    auto cfg = config_from_json({{"preset", "waterbirds-like"}});
    cfg.dataset.n_train = 200;
    cfg.dataset.n_val = 160;
    cfg.dataset.n_test = 200;
    cfg.erm.epochs = 3;
    cfg.gap_last_layer.train.epochs = 3;
    cfg.gap_all_layers.train.epochs = 3;
    cfg.gap_last_layer.gap.context_batch_size = 32;
    cfg.gap_all_layers.gap.context_batch_size = 32;
    cfg.n_seeds = 2;
    return cfg;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) {
        path = fs::temp_directory_path() / name;
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("presets resolve and validate") {
    for (const auto& name : preset_names()) {
        const auto cfg = config_from_json({{"preset", name}});
        CHECK_NOTHROW(cfg.validate());
        CHECK(cfg.name == name);
    }
    CHECK_THROWS_AS(preset_json("nope"), std::invalid_argument);
}

TEST_CASE("preset proportions match the canonical tasks") {
    const auto wb = config_from_json({{"preset", "waterbirds-like"}});
    CHECK(wb.dataset.train_group_proportions == std::vector<double>{0.22, 0.01, 0.04, 0.73});
    const auto ca = config_from_json({{"preset", "celeba-like"}});
    CHECK(ca.dataset.train_group_proportions == std::vector<double>{0.44, 0.41, 0.14, 0.01});
    const auto nli = config_from_json({{"preset", "multinli-like"}});
    CHECK(nli.dataset.num_classes == 3);
    CHECK(nli.dataset.train_group_proportions.size() == 6);
}

TEST_CASE("preset overrides merge recursively") {
    const auto cfg = config_from_json({{"preset", "waterbirds-like"},
                                       {"n_seeds", 3},
                                       {"gap_last_layer", {{"rho", 0.0}}},
                                       {"dataset", {{"n_train", 1234}}}});
    CHECK(cfg.n_seeds == 3);
    CHECK(cfg.gap_last_layer.gap.rho == 0.0);
    CHECK(cfg.gap_last_layer.gap.gamma == 4.0);  // untouched preset value
    CHECK(cfg.dataset.n_train == 1234);
    CHECK(cfg.dataset.n_test == 4000);  // untouched preset value
}

TEST_CASE("config json round trip") {
    const auto cfg = tiny_config();
    const auto round = config_from_json(to_json(cfg));
    CHECK(to_json(round) == to_json(cfg));
}

TEST_CASE("cmd_generate writes four splits and a manifest") {
    TempDir dir("gap_test_generate");
    auto cfg = tiny_config();
    REQUIRE(cmd_generate(cfg, dir.path.string()) == 0);
    for (const char* f : {"train.csv", "val_context.csv", "val_tune.csv", "test.csv",
                          "manifest.json"})
        CHECK(fs::exists(dir.path / f));
    nlohmann::json manifest;
    std::ifstream(dir.path / "manifest.json") >> manifest;
    CHECK(manifest["dataset"]["train_group_proportions"] ==
          nlohmann::json({0.22, 0.01, 0.04, 0.73}));
    CHECK(manifest["tool_version"] == kToolVersion);

    SECTION("rerunning with the same seed is byte identical") {
        const auto before = slurp(dir.path / "train.csv");
        TempDir dir2("gap_test_generate2");
        REQUIRE(cmd_generate(cfg, dir2.path.string()) == 0);
        CHECK(slurp(dir2.path / "train.csv") == before);
        CHECK(slurp(dir2.path / "test.csv") == slurp(dir.path / "test.csv"));
    }
    SECTION("generated splits load back as grouped datasets") {
        const auto train = load_csv((dir.path / "train.csv").string());
        CHECK(train.size() == 200);
        CHECK(train.split_tag == "train");
        const auto ctx = load_csv((dir.path / "val_context.csv").string());
        CHECK(ctx.split_tag == "val_context");
    }
}

TEST_CASE("dry run prints the resolved config and touches nothing") {
    TempDir dir("gap_test_dryrun");
    auto cfg = tiny_config();
    const auto out = dir.path / "results";
    REQUIRE(cmd_run(cfg, out.string(), 1, /*dry_run=*/true) == 0);
    CHECK_FALSE(fs::exists(out));
}

TEST_CASE("cmd_run writes records, reports, checkpoints, and aggregates") {
    TempDir dir("gap_test_run");
    auto cfg = tiny_config();
    cfg.n_seeds = 2;
    REQUIRE(cmd_run(cfg, dir.path.string(), 1) == 0);

    CHECK(fs::exists(dir.path / "manifest.json"));
    CHECK(fs::exists(dir.path / "reports.csv"));
    const auto agg = slurp(dir.path / "aggregate.csv");
    CHECK(agg.starts_with("method,worst,average,worst_se,average_se\n"));
    CHECK(agg.find("erm,") != std::string::npos);
    CHECK(agg.find("gap_last_layer,") != std::string::npos);
    CHECK(agg.find("gap_all_layers,") != std::string::npos);

    SECTION("checkpoints re-evaluate to the stored metrics") {
        const auto ckpt = dir.path / "checkpoints" / "gap_last_layer_seed100.gapckpt";
        REQUIRE(fs::exists(ckpt));
        // compare cmd_eval's output against the stored report
        TempDir gen_dir("gap_test_run_data");
        REQUIRE(cmd_generate(cfg, gen_dir.path.string()) == 0);
        const auto report_path = dir.path / "eval_report.json";
        REQUIRE(cmd_eval(ckpt.string(), (gen_dir.path / "test.csv").string(),
                         report_path.string()) == 0);
        nlohmann::json fresh, stored;
        std::ifstream(report_path) >> fresh;
        std::ifstream(dir.path / "reports" / "gap_last_layer_seed100.json") >> stored;
        CHECK(fresh["worst_group_acc"] == stored["worst_group_acc"]);
        CHECK(fresh["per_group_acc"] == stored["per_group_acc"]);
    }

    SECTION("rerunning the identical config is byte identical") {
        const auto agg_before = slurp(dir.path / "aggregate.csv");
        const auto reports_before = slurp(dir.path / "reports.csv");
        TempDir dir2("gap_test_run_again");
        REQUIRE(cmd_run(cfg, dir2.path.string(), 1) == 0);
        CHECK(slurp(dir2.path / "aggregate.csv") == agg_before);
        CHECK(slurp(dir2.path / "reports.csv") == reports_before);
    }
}

TEST_CASE("cmd_run consumes pre-generated CSV datasets") {
    TempDir gen_dir("gap_test_csv_data");
    auto cfg = tiny_config();
    REQUIRE(cmd_generate(cfg, gen_dir.path.string()) == 0);

    TempDir out_a("gap_test_csv_run_a");
    TempDir out_b("gap_test_csv_run_b");
    auto from_csv = cfg;
    from_csv.dataset_dir = gen_dir.path.string();
    REQUIRE(cmd_run(from_csv, out_a.path.string(), 1) == 0);
    REQUIRE(cmd_run(cfg, out_b.path.string(), 1) == 0);
    // the CSV round trip preserves every value, so results coincide exactly
    CHECK(slurp(out_a.path / "aggregate.csv") == slurp(out_b.path / "aggregate.csv"));
}

TEST_CASE("GAP_SEED_BASE overrides the configured seed base") {
    TempDir dir("gap_test_seedbase");
    auto cfg = tiny_config();
    cfg.n_seeds = 1;
    setenv("GAP_SEED_BASE", "777", 1);
    const int rc = cmd_run(cfg, dir.path.string(), 1);
    unsetenv("GAP_SEED_BASE");
    REQUIRE(rc == 0);
    CHECK(fs::exists(dir.path / "records" / "erm_seed777.json"));
}

TEST_CASE("ablation sweep") {
    TempDir dir("gap_test_ablate");
    auto cfg = tiny_config();
    cfg.n_seeds = 2;
    const std::vector<double> values = {1.0, 4.0};
    REQUIRE(cmd_ablate(cfg, AblateAxis::gamma, values, dir.path.string(), 1, /*plot=*/true) == 0);
    const auto csv = slurp(dir.path / "sweep.csv");
    CHECK(csv.starts_with("gamma,wga_mean,wga_se,avg_mean,avg_se\n"));
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);  // header + two rows
    CHECK(fs::exists(dir.path / "sweep.svg"));
    const auto svg = slurp(dir.path / "sweep.svg");
    CHECK(svg.starts_with("<svg"));

    SECTION("a single preset-valued sweep matches cmd_run's row") {
        TempDir run_dir("gap_test_ablate_run");
        auto run_cfg = cfg;
        run_cfg.run_all_layers = false;
        REQUIRE(cmd_run(run_cfg, run_dir.path.string(), 1) == 0);
        TempDir sweep_dir("gap_test_ablate_one");
        const std::vector<double> preset_value = {cfg.gap_last_layer.gap.gamma};
        REQUIRE(cmd_ablate(cfg, AblateAxis::gamma, preset_value, sweep_dir.path.string(), 1) ==
                0);
        // wga mean from the sweep equals the aggregate row from cmd_run
        const auto sweep = slurp(sweep_dir.path / "sweep.csv");
        const auto agg = slurp(run_dir.path / "aggregate.csv");
        const auto sweep_row = sweep.substr(sweep.find('\n') + 1);
        const auto wga = sweep_row.substr(sweep_row.find(',') + 1,
                                          sweep_row.find(',', sweep_row.find(',') + 1) -
                                              sweep_row.find(',') - 1);
        CHECK(agg.find("gap_last_layer," + wga) != std::string::npos);
    }
}

TEST_CASE("cmd_eval error paths") {
    CHECK(cmd_eval("/nonexistent/ckpt.gapckpt", "/nonexistent/data.csv") == 2);
    TempDir dir("gap_test_eval_err");
    // existing checkpoint, missing dataset
    const MlpSpec spec{{2, 2}};
    const auto params = init_mlp(spec, 0);
    const auto ckpt = dir.path / "m.gapckpt";
    save_checkpoint(params, spec, ckpt.string());
    CHECK(cmd_eval(ckpt.string(), (dir.path / "missing.csv").string()) == 2);
    // dimension mismatch between checkpoint and dataset
    GroupedDataset d = GroupedDataset::from_examples({{{1.0, 2.0, 3.0}, 0, 0, 0}}, "test");
    const auto csv = dir.path / "d.csv";
    save_csv(d, csv.string());
    CHECK(cmd_eval(ckpt.string(), csv.string()) == 1);
}

TEST_CASE("in-sample evaluation is flagged in the report") {
    TempDir dir("gap_test_eval_insample");
    const MlpSpec spec{{2, 2}};
    const auto params = init_mlp(spec, 0);
    const auto ckpt = dir.path / "m.gapckpt";
    save_checkpoint(params, spec, ckpt.string());
    GroupedDataset d = GroupedDataset::from_examples(
        {{{1.0, 2.0}, 0, 0, 0}, {{-1.0, 0.5}, 1, 0, 2}}, "train");
    const auto csv = dir.path / "train.csv";
    save_csv(d, csv.string());
    const auto out = dir.path / "report.json";
    REQUIRE(cmd_eval(ckpt.string(), csv.string(), out.string()) == 0);
    nlohmann::json j;
    std::ifstream(out) >> j;
    CHECK(j["in_sample"] == true);
}
