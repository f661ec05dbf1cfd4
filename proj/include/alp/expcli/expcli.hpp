#pragma once

#include "alp/diagnostics/diagnostics.hpp"
#include "alp/trainer/trainer.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace alp::expcli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitCrash = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitDiverged = 3;

/// Invalid, unknown or mistyped configuration.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RunOptions {
    std::size_t pass_at_k_prompts = 32;
    std::size_t pass_at_k_samples = 16;
    std::size_t checkpoint_every = 0; // 0: final checkpoint only
    bool envelope_per_iteration = true;
};

struct ExperimentConfig {
    std::string name = "experiment";
    trainer::RunSetup setup;
    RunOptions options;
    std::string output_dir = "runs/experiment";
    std::vector<std::uint64_t> seeds{0};

    /// Throws ConfigError.
    void validate() const;
};

/// Every key is written, so the document fully determines the run.
json to_json(const ExperimentConfig& config);
/// Rejects unknown keys and wrong value types. Missing keys keep their defaults.
ExperimentConfig config_from_json(const json& doc);
/// Parses JSON text; throws ConfigError on syntax errors.
json parse_config_text(std::string_view text);
ExperimentConfig load_config(const fs::path& path, std::span<const std::string> overrides = {});

/// Applies "a.b.c=value" to a config document. The value is parsed as JSON when it parses,
/// otherwise taken as a string. Throws ConfigError for malformed overrides.
void apply_override(json& doc, std::string_view assignment);

/// Canonical bytes of a config (2-space indented JSON with a trailing newline).
std::string serialize_config(const ExperimentConfig& config);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const fs::path& path);

/// $ALP_OUTPUT_ROOT when set and non-empty, else the working directory.
fs::path output_root();
/// output_dir resolved against output_root() when relative.
fs::path resolve_output(const std::string& output_dir);

/// Writes `bytes` to `path` through `path.partial` and a rename.
void write_atomic(const fs::path& path, std::string_view bytes);

// ---------------------------------------------------------------------------------------
// Runs.

struct RunSummary {
    std::uint64_t seed = 0;
    fs::path dir;
    bool diverged = false;
    std::optional<trainer::DivergenceRecord> divergence;
    std::uint64_t iterations = 0;
    double final_reward_mean = 0.0;      // mean reward over the last min(50, iterations) iterations
    double max_abs_log_ratio_p99 = 0.0;  // over every update
    std::vector<double> pass_at_k;       // k = 1, 2, 4, ..., n
    std::string first_rollout_sha256;
};

/// Called after every iteration with its result and the running state.
using IterationHook = std::function<void(const trainer::IterationResult&, const trainer::RunState&)>;

/// Trains one seed into `dir`: config.json, metrics.csv, envelopes/, checkpoints/,
/// pass_at_k.json and manifest.json. A divergence abort stops training and is recorded.
RunSummary run_seed(const ExperimentConfig& config, std::uint64_t seed, const fs::path& dir,
                    const IterationHook& hook = {});

/// One directory per seed, `<output>/seed_<s>`.
std::vector<RunSummary> run_experiment(const ExperimentConfig& config);

/// The k grid 1, 2, 4, ... up to n (n appended when not a power of two).
std::vector<std::size_t> pass_at_k_grid(std::size_t n);
/// Mean pass@k over fresh evaluation prompts sampled from the inference engine.
std::vector<double> evaluate_pass_at_k(const trainer::RunSetup& setup, const policy::PolicyParams& params,
                                       const RunOptions& options);

// ---------------------------------------------------------------------------------------
// Presets: a base document plus named override sets, one run per variant.

struct PresetVariant {
    std::string name;
    std::vector<std::string> overrides;
};

struct Preset {
    std::string name;
    json base;
    std::vector<PresetVariant> variants;
};

Preset load_preset(const fs::path& path);
/// Variant configs with output_dir suffixed by the variant name. Throws ConfigError.
std::vector<ExperimentConfig> expand_preset(const Preset& preset, std::span<const std::string> overrides = {});
bool is_preset_document(const json& doc);

// ---------------------------------------------------------------------------------------
// Envelope replay: one checkpoint, one frozen rollout batch, two arms of n_updates each.

struct ReplayArm {
    std::string name;
    std::vector<double> sigma;
    diagnostics::Envelope envelope;
};

struct ReplayReport {
    std::uint64_t iter = 0;
    std::size_t n_updates = 0;
    double zeta_std = 0.0;
    ReplayArm unperturbed;
    ReplayArm perturbed;
    /// Lowest bin populated in both arms, with each arm's 99th percentile |log ratio| there.
    std::optional<std::size_t> lowest_common_bin;
    double unperturbed_low_p99 = 0.0;
    double perturbed_low_p99 = 0.0;
};

/// The unperturbed arm runs the same method with perturbation disabled; the perturbed arm
/// uses the checkpoint's sigma. `zeta_std` overrides the run's mismatch when given.
ReplayReport replay_envelope(const trainer::RunSetup& setup, const trainer::RunState& state, std::size_t n_updates);
ReplayReport replay_envelope(const fs::path& run_dir, const fs::path& checkpoint, std::size_t n_updates,
                             std::optional<double> zeta_std = std::nullopt);
json to_json(const ReplayReport& report);

// ---------------------------------------------------------------------------------------
// Plot data: tidy long-format CSVs with columns series, x, y, quantile.

/// Figures: reward, grad-norm, entropy, kl, log-ratio, sigma, pass-at-k, envelope.
/// Returns the written file. Throws std::runtime_error when an input lacks a needed column
/// or file.
fs::path emit_plotdata(std::span<const fs::path> run_dirs, const std::string& figure, const fs::path& out_dir);
std::vector<std::string> plot_figures();

// ---------------------------------------------------------------------------------------
// Theory probes: stein, kl-bound, taylor, smoothness, landscape. Writes <probe>.json (and a
// curve CSV for landscape) into out_dir and returns the report.

json theory_probe(const std::string& probe, const json& params, const fs::path& out_dir);
std::vector<std::string> theory_probes();

/// Command-line entry point; returns the process exit code.
int cli_main(int argc, char** argv);

} // namespace alp::expcli
