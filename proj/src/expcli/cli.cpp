#include "alp/expcli/expcli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

namespace alp::expcli {

namespace {

json read_json_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot read " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

/// Configs named by `path`: one for a plain document, one per variant for a preset.
std::vector<ExperimentConfig> configs_from(const fs::path& path, const std::vector<std::string>& overrides)
{
    if (is_preset_document(read_json_file(path))) {
        return expand_preset(load_preset(path), overrides);
    }
    return {load_config(path, overrides)};
}

int cmd_run(const fs::path& path, const std::vector<std::string>& overrides)
{
    const auto configs = configs_from(path, overrides);
    for (const auto& c : configs) {
        c.validate();
    }
    bool diverged = false;
    for (const auto& c : configs) {
        for (const auto& s : run_experiment(c)) {
            std::cout << c.name << " seed " << s.seed << ": " << s.iterations << " iterations, final reward "
                      << s.final_reward_mean << ", max |log ratio| p99 " << s.max_abs_log_ratio_p99 << ", "
                      << s.dir.string() << "\n";
            if (s.diverged) {
                std::cout << "  diverged at iteration " << s.divergence->iter << ": " << s.divergence->reason << "\n";
                diverged = true;
            }
        }
    }
    return diverged ? kExitDiverged : kExitOk;
}

int cmd_validate(const fs::path& path, const std::vector<std::string>& overrides)
{
    for (const auto& c : configs_from(path, overrides)) {
        c.validate();
        std::cout << c.name << ": ok (" << sha256_hex(serialize_config(c)) << ")\n";
    }
    return kExitOk;
}

} // namespace

int cli_main(int argc, char** argv)
{
    CLI::App app{"Experiment driver for adaptive layerwise perturbation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", ALP_VERSION_STRING);

    fs::path config_path;
    std::vector<std::string> overrides;
    auto* run = app.add_subcommand("run", "Train every seed of a config or preset");
    run->add_option("config", config_path, "Config or preset JSON")->required();
    run->add_option("--set", overrides, "Override a config key: a.b=value (flag > file > default)");

    auto* validate = app.add_subcommand("validate-config", "Check a config or preset without running it");
    validate->add_option("config", config_path, "Config or preset JSON")->required();
    validate->add_option("--set", overrides, "Override a config key: a.b=value");

    fs::path run_dir, checkpoint, out_path;
    std::size_t n_updates = 16;
    std::optional<double> zeta_std;
    auto* replay = app.add_subcommand("replay-envelope", "Envelope with and without perturbation from one checkpoint");
    replay->add_option("run_dir", run_dir, "Run directory")->required();
    replay->add_option("--checkpoint", checkpoint, "Checkpoint directory (default: <run_dir>/checkpoints/final)");
    replay->add_option("--updates", n_updates, "Updates per arm")->capture_default_str();
    replay->add_option("--zeta-std", zeta_std, "Override the mismatch noise level");
    replay->add_option("--out", out_path, "Report path (default: <run_dir>/replay_envelope.json)");

    std::vector<fs::path> run_dirs;
    std::vector<std::string> figures;
    fs::path plot_dir = "plotdata";
    auto* plot = app.add_subcommand("emit-plotdata", "Tidy CSVs for figures");
    plot->add_option("run_dirs", run_dirs, "Run directories")->required();
    plot->add_option("--figure", figures, "Figure id (repeatable; default: all)")
        ->check(CLI::IsMember(plot_figures()));
    plot->add_option("--out", plot_dir, "Output directory")->capture_default_str();

    std::string probe;
    std::string params_text;
    fs::path probe_dir = "probes";
    auto* theory = app.add_subcommand("theory-probe", "Run a theory check");
    theory->add_option("probe", probe, "Probe id")->required()->check(CLI::IsMember(theory_probes()));
    theory->add_option("--params", params_text, "JSON object or path to one");
    theory->add_option("--set", overrides, "Override one parameter: key=value");
    theory->add_option("--out", probe_dir, "Output directory")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*run) {
            return cmd_run(config_path, overrides);
        }
        if (*validate) {
            return cmd_validate(config_path, overrides);
        }
        if (*replay) {
            if (checkpoint.empty()) {
                checkpoint = run_dir / "checkpoints" / "final";
            }
            if (out_path.empty()) {
                out_path = run_dir / "replay_envelope.json";
            }
            const auto report = replay_envelope(run_dir, checkpoint, n_updates, zeta_std);
            write_atomic(out_path, to_json(report).dump(2) + "\n");
            std::cout << "lowest common bin "
                      << (report.lowest_common_bin ? std::to_string(*report.lowest_common_bin) : "none")
                      << ": p99 |log ratio| unperturbed " << report.unperturbed_low_p99 << ", perturbed "
                      << report.perturbed_low_p99 << "\n";
            return kExitOk;
        }
        if (*plot) {
            if (figures.empty()) {
                figures = plot_figures();
            }
            for (const auto& f : figures) {
                std::cout << emit_plotdata(run_dirs, f, plot_dir).string() << "\n";
            }
            return kExitOk;
        }
        if (*theory) {
            json params = json::object();
            if (!params_text.empty()) {
                params = fs::exists(params_text) ? read_json_file(params_text) : parse_config_text(params_text);
            }
            for (const auto& o : overrides) {
                apply_override(params, o);
            }
            std::cout << theory_probe(probe, params, probe_dir).dump(2) << "\n";
            return kExitOk;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitCrash;
    }
    return kExitCrash;
}

} // namespace alp::expcli
