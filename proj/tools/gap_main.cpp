// Command-line front end: generate / run / ablate / eval.

#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "gap/experiment.hpp"

namespace {

std::vector<double> parse_values(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(std::stod(cell));
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Group-aware prior training for subpopulation shift"};
    app.require_subcommand(1);
    app.set_version_flag("--version", gap::kToolVersion);

    std::string config_path, out_dir, axis = "gamma", values_csv, checkpoint, data_path, out_path;
    int jobs = 1, seeds_override = 0;
    bool dry_run = false, plot = false;

    auto* gen = app.add_subcommand("generate", "Write synthetic dataset splits as CSV");
    gen->add_option("--config", config_path, "experiment config JSON")->required();
    gen->add_option("--out", out_dir, "output directory");

    auto* run = app.add_subcommand("run", "Run the ERM -> GAP pipeline over seeds");
    run->add_option("--config", config_path, "experiment config JSON")->required();
    run->add_option("--out", out_dir, "output directory");
    run->add_option("--jobs", jobs, "parallel seed workers")->check(CLI::PositiveNumber);
    run->add_option("--seeds", seeds_override, "override number of seeds");
    run->add_flag("--dry-run", dry_run, "print the resolved config and exit");

    auto* abl = app.add_subcommand("ablate", "Sweep the GAP last-layer stage along rho or gamma");
    abl->add_option("--config", config_path, "experiment config JSON")->required();
    abl->add_option("--axis", axis, "rho or gamma")->required();
    abl->add_option("--values", values_csv, "comma-separated sweep values")->required();
    abl->add_option("--out", out_dir, "output directory");
    abl->add_option("--jobs", jobs, "parallel seed workers")->check(CLI::PositiveNumber);
    abl->add_flag("--plot", plot, "also write an SVG chart of the sweep");

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint against a dataset CSV");
    ev->add_option("--checkpoint", checkpoint, "checkpoint file (.gapckpt)")->required();
    ev->add_option("--data", data_path, "dataset CSV")->required();
    ev->add_option("--out", out_path, "report JSON path (a .csv sibling is written too)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (ev->parsed()) return gap::cmd_eval(checkpoint, data_path, out_path);

        gap::ExperimentConfig cfg = gap::load_config_file(config_path);
        if (seeds_override > 0) cfg.n_seeds = static_cast<std::size_t>(seeds_override);
        if (out_dir.empty()) out_dir = cfg.output_dir;

        if (gen->parsed()) return gap::cmd_generate(cfg, out_dir);
        if (run->parsed()) return gap::cmd_run(cfg, out_dir, jobs, dry_run);
        if (abl->parsed())
            return gap::cmd_ablate(cfg, gap::ablate_axis_from_string(axis),
                                   parse_values(values_csv), out_dir, jobs, plot);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
