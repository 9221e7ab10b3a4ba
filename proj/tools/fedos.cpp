// Command-line front end: one verb per experiment kind. Prints a single JSON
// line on stdout on success; on failure a JSON error line on stderr and a
// nonzero exit code.

#include <filesystem>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fedos/config.hpp"
#include "fedos/error.hpp"
#include "fedos/experiment.hpp"
#include "fedos/report.hpp"

namespace fs = std::filesystem;
using namespace fedos;

namespace {

enum Exit : int { kOk = 0, kFailure = 1, kConfig = 2, kIo = 3, kDivergence = 4, kUsage = 64 };

struct Overrides {
    std::string config;
    std::vector<std::string> sets;
    std::optional<double> alpha;
    std::optional<int> rounds;
    std::optional<std::string> variant;
    std::vector<std::uint64_t> seeds;
    std::optional<std::string> out;
};

void add_common(CLI::App* cmd, Overrides& o) {
    cmd->add_option("-c,--config", o.config, "YAML experiment config (defaults when omitted)");
    cmd->add_option("--set", o.sets, "section.key=value override, repeatable");
    cmd->add_option("--alpha", o.alpha, "partition.alpha");
    cmd->add_option("--rounds", o.rounds, "run.rounds (epochs for centralized)");
    cmd->add_option("--variant", o.variant, "variant.name: fedavg|fedprox|fedir|fedos");
    cmd->add_option("--seed", o.seeds, "run.seeds; repeat or comma-separate for several")->delimiter(',');
    cmd->add_option("--out", o.out, "output.dir");
}

ExperimentConfig build_config(const Overrides& o, std::optional<RunMode> mode) {
    auto cfg = o.config.empty() ? parse_config("") : load_config(o.config);
    if (mode) cfg.run.mode = *mode;
    for (const auto& s : o.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError(s, "--set expects section.key=value");
        set_config_value(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    if (o.alpha) cfg.partition.alpha = *o.alpha;
    if (o.rounds) (cfg.run.mode == RunMode::Centralized ? cfg.run.epochs : cfg.run.rounds) = *o.rounds;
    if (o.variant) cfg.variant.name = *o.variant;
    if (!o.seeds.empty()) cfg.run.seeds = o.seeds;
    if (o.out) cfg.output.dir = *o.out;
    validate_config(cfg);
    return cfg;
}

nlohmann::ordered_json experiment_json(const ExperimentArtifacts& art) {
    nlohmann::ordered_json j;
    j["status"] = "ok";
    j["dir"] = art.dir;
    j["config_hash"] = art.config_hash;
    auto seeds = nlohmann::ordered_json::array();
    for (const auto& s : art.seeds) {
        seeds.push_back({{"seed", s.seed},
                         {"final_val_acc", s.trace.final_val()},
                         {"max_rel_val_acc", s.trace.max_rel()},
                         {"mean_rel_val_acc", s.trace.mean_rel()}});
    }
    j["seeds"] = seeds;
    return j;
}

int fail(const std::string& code, const std::string& message, int exit_code, const std::string& field = "") {
    nlohmann::ordered_json j;
    j["status"] = "error";
    j["code"] = code;
    if (!field.empty()) j["field"] = field;
    j["message"] = message;
    std::cerr << j.dump() << std::endl;
    return exit_code;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated learning simulator with unknown-class augmentation"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all");

    Overrides o;
    auto* centralized = app.add_subcommand("centralized", "Train on the pooled training set (reference accuracy)");
    auto* federated = app.add_subcommand("federated", "Federated training over Dirichlet-partitioned clients");
    auto* ablation = app.add_subcommand("ablation", "One federated run per value of an axis");
    auto* report = app.add_subcommand("report", "Table and chart from run directories");
    auto* gan = app.add_subcommand("gan-train", "Train the small generator used for unknown samples");
    auto* inspect = app.add_subcommand("partition-inspect", "Write partitions and their label statistics");
    for (auto* cmd : {centralized, federated, ablation, gan, inspect}) add_common(cmd, o);

    std::string axis;
    std::vector<double> values;
    ablation->add_option("--axis", axis, "alpha|local_epochs|client_fraction|W_U|F_U");
    ablation->add_option("--values", values, "axis values")->delimiter(',');

    std::vector<std::string> run_dirs;
    std::vector<int> checkpoints{125, 250, 375, 500};
    std::string report_out = "report";
    report->add_option("runs", run_dirs, "run directories (each with seed_*/trace.csv)")->required();
    report->add_option("--checkpoints", checkpoints, "rounds for the @N columns")->delimiter(',');
    report->add_option("--out", report_out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("usage", e.what(), kUsage);
    }

    try {
        nlohmann::ordered_json out;
        if (centralized->parsed() || federated->parsed()) {
            const auto cfg = build_config(o, centralized->parsed() ? RunMode::Centralized : RunMode::Federated);
            out = experiment_json(run_experiment(cfg));
        } else if (ablation->parsed()) {
            auto cfg = build_config(o, RunMode::Federated);
            if (!axis.empty()) cfg.ablation.axis = axis;
            if (!values.empty()) cfg.ablation.values = values;
            validate_config(cfg);
            if (cfg.ablation.axis.empty()) throw ConfigError("ablation.axis", "no axis given (--axis)");
            check_paths(cfg);
            const auto table = run_ablation_matrix(cfg, cfg.ablation.axis, cfg.ablation.values);
            out["status"] = "ok";
            out["dir"] = cfg.output.dir;
            out["table"] = (fs::path(cfg.output.dir) / "ablation.csv").string();
            int failed = 0;
            for (const auto& r : table.rows) failed += r.error.empty() ? 0 : 1;
            out["cells"] = static_cast<int>(table.rows.size());
            out["failed_cells"] = failed;
        } else if (report->parsed()) {
            std::vector<ReportInput> inputs;
            for (const auto& d : run_dirs) inputs.push_back(report_input_from_dir(d));
            const auto res = emit_report(inputs, checkpoints, report_out);
            out["status"] = "ok";
            out["dir"] = report_out;
            out["rows"] = static_cast<int>(res.table.rows.size());
            out["missing"] = res.missing;
        } else if (gan->parsed()) {
            const auto cfg = build_config(o, std::nullopt);
            const auto run = run_gan_training(cfg, cfg.run.seeds.front());
            out["status"] = "ok";
            out["dir"] = cfg.output.dir;
            out["generator_parameters"] = run.generator_parameters;
            out["classifier_parameters"] = run.classifier_parameters;
            out["mean_image_error"] = run.mean_image_error;
            out["discriminator_accuracy"] = run.discriminator_accuracy;
        } else if (inspect->parsed()) {
            const auto cfg = build_config(o, RunMode::Federated);
            check_paths(cfg);
            const auto data = load_experiment_data(cfg);
            const fs::path root(cfg.output.dir);
            fs::create_directories(root);
            auto parts = nlohmann::ordered_json::array();
            for (const auto seed : cfg.run.seeds) {
                const auto spec = partition_spec(cfg, seed);
                const auto p = dirichlet_partition(data.train, spec);
                const auto stem = root / ("partition_seed_" + std::to_string(seed));
                write_file(stem.string() + ".fsp", encode_partition(p));
                write_file(stem.string() + ".json", partition_summary_json(p, spec));
                std::vector<double> shares;
                for (const auto& h : p.histograms) shares.push_back(dominant_share(h));
                std::sort(shares.begin(), shares.end());
                parts.push_back({{"seed", seed},
                                 {"file", stem.string() + ".fsp"},
                                 {"median_dominant_share", shares[shares.size() / 2]}});
            }
            out["status"] = "ok";
            out["dir"] = cfg.output.dir;
            out["partitions"] = parts;
        }
        std::cout << out.dump() << std::endl;
        return kOk;
    } catch (const ConfigError& e) {
        return fail(e.code(), e.what(), kConfig, e.field());
    } catch (const IoError& e) {
        return fail(e.code(), e.what(), kIo);
    } catch (const DivergenceError& e) {
        return fail(e.code(), e.what(), kDivergence);
    } catch (const Error& e) {
        return fail(e.code(), e.what(), kFailure);
    } catch (const std::exception& e) {
        return fail("internal", e.what(), kFailure);
    }
}
