#pragma once

#include "alp/diagnostics/diagnostics.hpp"
#include "alp/engines/engines.hpp"
#include "alp/objectives/objectives.hpp"
#include "alp/policy/policy.hpp"
#include "alp/tasks/tasks.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace alp::trainer {

using num::Tensor;

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::uint64_t step = 0;
};

/// Decoupled-weight-decay Adam with bias-corrected moments. Moments are created on the
/// first call. Throws std::invalid_argument on shape mismatch and num::NumericError on a
/// non-finite gradient.
void adamw_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state, double lr,
                double weight_decay, const AdamConfig& config = {});

struct TrainerConfig {
    std::size_t prompts_per_iter = 32;
    std::size_t group_size = 8;
    std::size_t updates_per_iter = 16;
    std::size_t micro_batch = 64; // sequences per update step
    double lr_theta = 1e-3;
    double weight_decay = 0.01;
    double lr_sigma = 5e-4;
    double sigma_init = 1e-4;
    AdamConfig adam;
    std::size_t total_iters = 300;
    std::uint64_t seed = 0;
    double temperature = 1.0;
    std::size_t rollout_workers = 1;
    std::size_t heldout_prompts = 16;
    double divergence_factor = 1e3;
    std::size_t divergence_window = 100;
    std::size_t divergence_min_history = 10;

    std::size_t batch_size() const { return prompts_per_iter * group_size; }
    /// Throws std::invalid_argument unless updates_per_iter >= 1, micro_batch divides the
    /// batch, sigma_init > 0 and lr_sigma >= 0.
    void validate() const;
};

/// Everything a run depends on.
struct RunSetup {
    tasks::TaskSpec task;
    policy::PolicyConfig policy;
    TrainerConfig trainer;
    objectives::ObjectiveConfig objective;
    engines::MismatchModel mismatch;
    policy::PerturbationSpec perturbation = policy::PerturbationSpec::all_layers();
    diagnostics::EnvelopeSpec envelope;

    void validate() const;
    /// The numerator is perturbed (ALP methods with a non-empty target set).
    bool perturbs() const;
};

struct RunState {
    std::uint64_t iter = 0; // completed iterations
    std::uint64_t step = 0; // completed update steps
    policy::PolicyParams params;
    AdamState adam_theta;
    AdamState adam_sigma;
    std::vector<double> grad_norm_window; // trailing gradient norms, oldest first

    static RunState fresh(const RunSetup& setup);
};

/// Writes policy.ckpt, optimizer.bin and state.json into `dir`.
void save_state(const RunState& state, const std::filesystem::path& dir);
RunState load_state(const RunSetup& setup, const std::filesystem::path& dir);

/// One row of the metrics stream.
struct UpdateMetrics {
    std::uint64_t iter = 0;
    std::uint64_t update = 0;
    std::uint64_t step = 0;
    double reward_mean = 0.0;
    double loss = 0.0;
    double surrogate = 0.0;
    double grad_norm = 0.0;
    double sigma_grad_norm = 0.0;
    double entropy = 0.0;
    double kl_train_infer = 0.0;
    double kl_policy_update = 0.0;
    double kl_heldout = 0.0;
    double clip_frac = 0.0;
    double mis_masked_frac = 0.0;
    std::vector<double> log_ratio_quantiles; // at the envelope levels
    double abs_log_ratio_p99 = 0.0;
    diagnostics::ShiftStats dp;
    std::vector<double> sigma; // one per perturbation target
};

std::vector<std::string> metrics_columns(const RunSetup& setup);
void write_metrics_header(const RunSetup& setup, std::ostream& out);
void write_metrics_row(const UpdateMetrics& row, std::ostream& out);

struct DivergenceRecord {
    std::uint64_t iter = 0;
    std::uint64_t update = 0;
    std::string reason;
    double grad_norm = 0.0;
    double trailing_median = 0.0;
};

struct IterationResult {
    std::vector<UpdateMetrics> updates;
    engines::RolloutBatch batch;              // scored, with advantages
    std::vector<std::size_t> correct_per_prompt;
    std::vector<double> envelope_log_ratios;  // valid tokens of every update
    std::vector<double> envelope_rollout_probs;
    std::optional<DivergenceRecord> divergence;
};

/// Per-response train-engine log-probs of `responses` under `params`.
std::vector<std::vector<double>> train_logprobs(const policy::PolicyParams& params,
                                                std::span<const engines::Response> responses);

struct GradientPass {
    objectives::LossResult loss;
    std::vector<std::vector<double>> lp_num;
    std::vector<Tensor> grad_weights;
    Tensor grad_log_sigma;
};

/// Numerator forward, loss assembly and backward for one minibatch. The numerator is
/// perturbed with `draw` when the method reads train_perturbed and `spec` has targets.
/// `lp_old` and the stored inference log-probs are constants.
GradientPass loss_gradient(const policy::PolicyParams& params, std::span<const engines::Response> responses,
                           std::span<const std::vector<double>> lp_old, const objectives::ObjectiveConfig& objective,
                           const policy::PerturbationSpec& spec, const std::optional<policy::PerturbationDraw>& draw);

/// Loss value only, through the same arithmetic as `loss_gradient`.
double loss_value(const policy::PolicyParams& params, std::span<const engines::Response> responses,
                  std::span<const std::vector<double>> lp_old, const objectives::ObjectiveConfig& objective,
                  const policy::PerturbationSpec& spec, const std::optional<policy::PerturbationDraw>& draw);

/// Seeds of the per-iteration streams.
std::uint64_t prompt_seed(const RunSetup& setup, std::uint64_t iter);
std::uint64_t rollout_seed(const RunSetup& setup, std::uint64_t iter);
std::uint64_t draw_seed(const RunSetup& setup, std::uint64_t iter, std::uint64_t update);

/// Prompts of iteration `iter`, with ids unique across the run.
std::vector<engines::Prompt> iteration_prompts(const RunSetup& setup, std::uint64_t iter);

/// Rollout under `params_old` plus scoring and group advantages.
engines::RolloutBatch collect(const RunSetup& setup, const policy::PolicyParams& params_old, std::uint64_t iter);

/// `n_updates` optimizer steps on a frozen, scored batch collected under `state.params`.
/// Denominator log-probs are computed once, before the first step.
IterationResult update_on_batch(RunState& state, const RunSetup& setup, engines::RolloutBatch batch,
                                std::size_t n_updates);

/// Snapshot, rollout, then updates_per_iter optimizer steps. Stops at the first diverging
/// step without applying it.
IterationResult run_iteration(RunState& state, const RunSetup& setup);

/// Exact mean KL(p_old || p_new) of the first response-token distribution over `prompts`.
double heldout_kl(const policy::PolicyParams& old_params, const policy::PolicyParams& new_params,
                  std::span<const engines::Prompt> prompts);

} // namespace alp::trainer
