#pragma once

#include "alp/engines/engines.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace alp::objectives {

using engines::EngineTag;
using engines::TokenLogProbs;

enum class Method { grpo_token, gspo_geo, token_mis, seq_mis, seq_bypass, token_alp, seq_alp };
enum class Aggregation { token, sequence, geometric_mean };
enum class MaskLevel { token, sequence };
enum class SeqClipMode { absolute, relative };

std::string to_string(Method m);
Method method_from_string(const std::string& name);
std::string to_string(Aggregation a);
Aggregation aggregation_from_string(const std::string& name);
std::string to_string(MaskLevel l);
MaskLevel mask_level_from_string(const std::string& name);
std::string to_string(SeqClipMode m);
SeqClipMode seq_clip_mode_from_string(const std::string& name);
const std::vector<Method>& all_methods();

/// Log-prob source of the ratio denominator.
enum class Denominator { train_old, infer };

/// Which log-prob sources a method reads.
struct Wiring {
    EngineTag numerator;       // train (theta) or train_perturbed (theta, sigma)
    Denominator denominator;   // policy-update ratio or direct train/infer ratio
    bool mis_mask;             // masks by rho' = pi_old^D / pi_old^infer
    Aggregation aggregation;   // default aggregation of the ratio
};
Wiring wiring(Method m);

struct ObjectiveConfig {
    Method method = Method::grpo_token;
    double eps_lo = 0.2;
    double eps_hi = 0.28;
    SeqClipMode seq_clip_mode = SeqClipMode::absolute;
    double seq_clip_lo = 0.5;
    double seq_clip_hi = 3.0;
    double mask_threshold = 2.0;
    std::optional<MaskLevel> mis_level; // default: sequence for both MIS methods
    double dual_clip_c = 10.0;
    double kl_coef = 0.001;
    double entropy_coef = 0.001;
    std::optional<Aggregation> aggregation; // default: the method's own

    /// Throws std::invalid_argument unless 0 < eps_lo < 1, eps_hi > 0, C > 1,
    /// dual_clip_c > 1 + eps_hi and the absolute sequence bounds satisfy 0 < lo < 1 < hi.
    void validate() const;
    Aggregation effective_aggregation() const { return aggregation.value_or(wiring(method).aggregation); }
    MaskLevel effective_mis_level() const { return mis_level.value_or(MaskLevel::sequence); }
    /// (lower, upper) ratio bounds for the effective aggregation.
    std::pair<double, double> clip_bounds() const;
};

/// A_i = (r_i - mean_g) / max(std_g, std_floor) with population std per group of
/// `group_size` consecutive responses.
std::vector<double> group_advantage(std::span<const double> rewards, std::size_t group_size,
                                    double std_floor = 1e-6);

/// log rho_t = lp_num_t - lp_den_t.
std::vector<double> token_ratio(const TokenLogProbs& num, const TokenLogProbs& den);
/// Sum of token log-ratios, the log of the sequence product.
double seq_ratio(std::span<const double> token_log_ratios);
/// exp(mean token log-ratio).
double gspo_ratio(std::span<const double> token_log_ratios, std::size_t length);
/// ALP log-ratios; requires a train_perturbed numerator and an infer denominator.
std::vector<double> alp_ratio(const TokenLogProbs& perturbed, const TokenLogProbs& infer);

/// Flags entries whose correction ratio exp(log_rho_prime) exceeds C. At sequence level
/// a whole response is flagged when the product over its tokens exceeds C.
std::vector<std::vector<bool>> mis_mask(const std::vector<std::vector<double>>& log_rho_prime, double C,
                                        MaskLevel level);

/// Surrogate of one unit: min(rho A, clip(rho, lo, hi) A), lower-bounded by c A for A < 0,
/// evaluated from log rho without overflow. `dlog` receives d surrogate / d log rho.
double clipped_surrogate(double log_rho, double advantage, double lo, double hi, double dual_c, double* dlog,
                         bool* clipped);

/// Inputs of one response; all vectors have one entry per response token.
struct SequenceInputs {
    std::vector<double> lp_num;
    std::vector<double> lp_old;   // pi^D_{theta_old}
    std::vector<double> lp_infer; // stored rollout values
    std::vector<double> entropy;  // entropy of the numerator distribution at each token
    std::vector<bool> valid;      // model tokens (tool and void tokens are false)
    double advantage = 0.0;
};

/// Per-response ratios in log space, plus clip and mask flags per loss unit.
struct RatioSet {
    std::vector<std::vector<double>> token_log;  // numerator / denominator per token
    std::vector<double> seq_log;                 // sum over valid tokens
    std::vector<std::vector<double>> prime_log;  // pi_old^D / pi_old^infer per token
    std::vector<std::vector<bool>> masked;       // MIS flags per token
    std::vector<std::vector<bool>> clipped;      // token aggregation
    std::vector<bool> seq_clipped;               // sequence aggregation
};

struct LossResult {
    double loss = 0.0;
    double surrogate = 0.0;
    double entropy = 0.0;
    double kl = 0.0;
    double clip_frac = 0.0;
    double mis_masked_frac = 0.0; // masked fraction of valid tokens
    std::size_t units = 0;        // unmasked tokens or sequences entering the mean
    std::vector<std::vector<double>> d_lp_num;
    std::vector<std::vector<double>> d_entropy;
    RatioSet ratios;
};

/// loss = -mean(surrogate) - entropy_coef * mean(entropy) + kl_coef * mean(k3), with
/// k3 = exp(D) - D - 1 and D = lp_old - lp_num. Means run over unmasked valid tokens
/// (token aggregation) or unmasked responses (sequence aggregation); entropy and KL always
/// average unmasked valid tokens. Gradients flow only into lp_num and entropy.
LossResult assemble_loss(const ObjectiveConfig& config, std::span<const SequenceInputs> batch);

} // namespace alp::objectives
