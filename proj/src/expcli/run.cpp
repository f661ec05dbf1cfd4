#include "alp/expcli/expcli.hpp"

#include "alp/engines/engines.hpp"
#include "alp/numcore/rng.hpp"
#include "alp/tasks/tasks.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>

#ifndef ALP_VERSION_STRING
#define ALP_VERSION_STRING "0.0.0"
#endif

namespace alp::expcli {

namespace {

constexpr std::uint64_t kEvalStream = 0x6576616c; // "eval"
constexpr std::size_t kSummaryWindow = 50;

std::string utc_now()
{
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string iter_name(std::uint64_t iter)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "iter_%04llu", static_cast<unsigned long long>(iter));
    return buf;
}

json divergence_json(const trainer::DivergenceRecord& d)
{
    return {{"iter", d.iter},
            {"update", d.update},
            {"reason", d.reason},
            {"grad_norm", std::isfinite(d.grad_norm) ? json(d.grad_norm) : json(nullptr)},
            {"trailing_median", d.trailing_median}};
}

json inventory(const fs::path& dir)
{
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().filename() != "manifest.json") {
            files.push_back(e.path());
        }
    }
    std::sort(files.begin(), files.end());
    json out = json::array();
    for (const auto& f : files) {
        out.push_back({{"path", fs::relative(f, dir).generic_string()},
                       {"bytes", fs::file_size(f)},
                       {"sha256", sha256_file(f)}});
    }
    return out;
}

} // namespace

std::vector<std::size_t> pass_at_k_grid(std::size_t n)
{
    std::vector<std::size_t> ks;
    for (std::size_t k = 1; k <= n; k *= 2) {
        ks.push_back(k);
    }
    if (ks.empty() || ks.back() != n) {
        ks.push_back(n);
    }
    return ks;
}

std::vector<double> evaluate_pass_at_k(const trainer::RunSetup& setup, const policy::PolicyParams& params,
                                       const RunOptions& options)
{
    const auto prompts = tasks::gen_prompts(setup.task, options.pass_at_k_prompts,
                                            num::derive_seed(setup.trainer.seed, {kEvalStream, 0}));
    engines::RolloutConfig rc;
    rc.group_size = options.pass_at_k_samples;
    rc.temperature = setup.trainer.temperature;
    rc.max_new = setup.task.response_budget();
    rc.workers = setup.trainer.rollout_workers;
    rc.seed = num::derive_seed(setup.trainer.seed, {kEvalStream, 1});
    const tasks::TaskEnvironment env(setup.task);
    auto batch = engines::rollout(params, setup.mismatch, prompts, rc, env);
    tasks::score_batch(setup.task, batch);
    std::vector<std::size_t> correct(prompts.size(), 0);
    for (std::size_t i = 0; i < batch.responses.size(); ++i) {
        correct[i / rc.group_size] += batch.responses[i].reward >= 1.0;
    }
    std::vector<double> out;
    for (std::size_t k : pass_at_k_grid(rc.group_size)) {
        out.push_back(diagnostics::pass_at_k(correct, rc.group_size, k));
    }
    return out;
}

RunSummary run_seed(const ExperimentConfig& config, std::uint64_t seed, const fs::path& dir, const IterationHook& hook)
{
    ExperimentConfig single = config;
    single.seeds = {seed};
    single.validate();
    trainer::RunSetup setup = single.setup;
    setup.trainer.seed = seed;

    std::error_code ec;
    fs::create_directories(dir / "envelopes", ec);
    fs::create_directories(dir / "checkpoints", ec);
    fs::create_directories(dir / "rollouts", ec);
    if (ec || !fs::is_directory(dir)) {
        throw std::runtime_error("cannot create run directory " + dir.string());
    }
    const std::string started = utc_now();
    const std::string config_text = serialize_config(single);
    write_atomic(dir / "config.json", config_text);

    RunSummary summary;
    summary.seed = seed;
    summary.dir = dir;

    const fs::path metrics_path = dir / "metrics.csv";
    fs::path metrics_partial = metrics_path;
    metrics_partial += ".partial";
    std::ofstream metrics(metrics_partial, std::ios::binary | std::ios::trunc);
    if (!metrics) {
        throw std::runtime_error("cannot write " + metrics_partial.string());
    }
    trainer::write_metrics_header(setup, metrics);

    auto state = trainer::RunState::fresh(setup);
    std::vector<double> rewards;
    while (state.iter < setup.trainer.total_iters) {
        const std::uint64_t iter = state.iter;
        auto res = trainer::run_iteration(state, setup);
        for (const auto& row : res.updates) {
            trainer::write_metrics_row(row, metrics);
            summary.max_abs_log_ratio_p99 = std::max(summary.max_abs_log_ratio_p99, row.abs_log_ratio_p99);
        }
        metrics.flush();
        if (iter == 0) {
            std::ostringstream ss;
            engines::write_jsonl(res.batch, ss);
            summary.first_rollout_sha256 = sha256_hex(ss.str());
            write_atomic(dir / "rollouts" / "iter_0000.jsonl", ss.str());
        }
        if (config.options.envelope_per_iteration && !res.envelope_log_ratios.empty()) {
            const auto env =
                diagnostics::ratio_envelope(res.envelope_log_ratios, res.envelope_rollout_probs, setup.envelope);
            write_atomic(dir / "envelopes" / (iter_name(iter) + ".json"), diagnostics::envelope_to_json(env));
        }
        if (hook) {
            hook(res, state);
        }
        if (res.divergence) {
            summary.diverged = true;
            summary.divergence = res.divergence;
            break;
        }
        rewards.push_back(res.updates.front().reward_mean);
        if (config.options.checkpoint_every > 0 && state.iter % config.options.checkpoint_every == 0 &&
            state.iter < setup.trainer.total_iters) {
            trainer::save_state(state, dir / "checkpoints" / iter_name(state.iter));
        }
    }
    metrics.close();
    fs::rename(metrics_partial, metrics_path);
    trainer::save_state(state, dir / "checkpoints" / "final");

    summary.iterations = state.iter;
    const std::size_t w = std::min(kSummaryWindow, rewards.size());
    for (std::size_t i = rewards.size() - w; i < rewards.size(); ++i) {
        summary.final_reward_mean += rewards[i] / static_cast<double>(w);
    }
    summary.pass_at_k = evaluate_pass_at_k(setup, state.params, single.options);
    write_atomic(dir / "pass_at_k.json",
                 json{{"k", pass_at_k_grid(single.options.pass_at_k_samples)},
                      {"pass_at_k", summary.pass_at_k},
                      {"prompts", single.options.pass_at_k_prompts},
                      {"samples", single.options.pass_at_k_samples},
                      {"method", objectives::to_string(setup.objective.method)}}
                         .dump(2) +
                     "\n");
    if (summary.divergence) {
        write_atomic(dir / "divergence.json", divergence_json(*summary.divergence).dump(2) + "\n");
    }

    json manifest{
        {"config_hash", sha256_hex(config_text)},
        {"code_version", ALP_VERSION_STRING},
        {"started_at", started},
        {"finished_at", utc_now()},
        {"seed", seed},
        {"status", summary.diverged ? "diverged" : "completed"},
        {"divergence", summary.divergence ? divergence_json(*summary.divergence) : json(nullptr)},
        {"first_rollout_sha256", summary.first_rollout_sha256},
        {"summary",
         {{"iterations", summary.iterations},
          {"final_reward_mean", summary.final_reward_mean},
          {"max_abs_log_ratio_p99", summary.max_abs_log_ratio_p99},
          {"pass_at_k", summary.pass_at_k}}},
        {"files", inventory(dir)},
    };
    write_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
    return summary;
}

std::vector<RunSummary> run_experiment(const ExperimentConfig& config)
{
    config.validate();
    const fs::path base = resolve_output(config.output_dir);
    std::vector<RunSummary> out;
    for (std::uint64_t s : config.seeds) {
        out.push_back(run_seed(config, s, base / ("seed_" + std::to_string(s))));
    }
    return out;
}

} // namespace alp::expcli
