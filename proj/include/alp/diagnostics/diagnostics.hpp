#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace alp::diagnostics {

enum class KlEstimator { k1, k3 };

/// Sample estimates of KL(p || q) from log-probs of tokens drawn from p.
/// k1 = mean(lp_p - lp_q); k3 = mean(exp(lp_q - lp_p) - (lp_q - lp_p) - 1).
/// Empty inputs give 0.
double kl_estimate(std::span<const double> lp_p, std::span<const double> lp_q, KlEstimator estimator);

/// Linear-interpolation quantile (level in percent, [0, 100]) of a non-empty sample.
double quantile(std::vector<double> values, double level);
/// Several quantiles from one sort.
std::vector<double> quantiles(std::vector<double> values, std::span<const double> levels);

/// Bins (0, e_0], (e_0, e_1], ..., (e_{k-2}, e_{k-1}] with e_{k-1} = 1.
struct EnvelopeSpec {
    std::vector<double> edges{1e-6, 1e-4, 1e-2, 1e-1, 1.0};
    std::vector<double> levels{1.0, 25.0, 50.0, 75.0, 99.0};

    /// Throws std::invalid_argument unless edges are positive, strictly increasing and end
    /// at 1, and levels are strictly increasing inside [0, 100].
    void validate() const;
    std::size_t bin_of(double prob) const;
};

struct EnvelopeBin {
    std::size_t index = 0;
    double lo = 0.0;
    double hi = 0.0;
    std::size_t count = 0;
    std::vector<double> quantiles;   // of log-ratio, one per level
    double abs_p99 = 0.0;            // 99th percentile of |log-ratio|
};

/// Only non-empty bins are present.
struct Envelope {
    EnvelopeSpec spec;
    std::vector<EnvelopeBin> bins;

    std::size_t total_count() const;
    const EnvelopeBin* find(std::size_t index) const;
};

/// Bins tokens by rollout probability and summarizes their log-ratios per bin.
Envelope ratio_envelope(std::span<const double> log_ratios, std::span<const double> rollout_probs,
                        const EnvelopeSpec& spec);

std::string envelope_to_json(const Envelope& env);
Envelope envelope_from_json(const std::string& text);

/// Mean over rows of -sum_v p_v log p_v for a row-major [rows x vocab] log-prob table.
double mean_entropy(std::span<const double> log_probs, std::size_t vocab);

/// Unbiased pass@k averaged over prompts: 1 - C(n - c, k) / C(n, k).
double pass_at_k(std::span<const std::size_t> correct, std::size_t n, std::size_t k);

struct ShiftStats {
    double mean = 0.0;
    double p75 = 0.0;
    double p99 = 0.0;
};
/// Summary of |exp(lp_perturbed) - exp(lp_unperturbed)| over realized tokens.
ShiftStats perturb_shift_stats(std::span<const double> lp_perturbed, std::span<const double> lp_unperturbed);

/// Pearson correlation; 0 when either side has zero variance.
double pearson(std::span<const double> x, std::span<const double> y);

/// Trailing mean over the last min(i + 1, window) entries.
std::vector<double> moving_average(std::span<const double> series, std::size_t window = 10);

} // namespace alp::diagnostics
