#pragma once

#include "alp/numcore/ops.hpp"
#include "alp/numcore/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace alp::policy {

using num::Tensor;
using num::Var;

struct PolicyConfig {
    int vocab_size = 32;
    int context_len = 24;
    int n_layers = 2;
    int d_model = 32;
    int n_heads = 2;
    double ln_eps = 1e-5;

    /// Throws std::invalid_argument unless d_model % n_heads == 0, context_len >= 2,
    /// vocab_size >= 4 and all extents are positive.
    void validate() const;
    bool operator==(const PolicyConfig&) const = default;
};

/// Weight standard deviations used by PolicyParams::init.
struct InitScales {
    double token_embedding = 1.0;
    double position_embedding = 0.1;
    double lm_head = 0.05;
};

/// Transformer weights plus per-target perturbation log-scales.
///
/// `perturb_log_sigma` has n_layers + 1 entries: entry h < n_layers scales the noise on
/// the input of block h, the last entry scales the noise on the logits.
struct PolicyParams {
    PolicyConfig config;
    std::vector<std::string> names;
    std::vector<Tensor> weights;
    Tensor perturb_log_sigma;
    std::uint64_t version = 0;

    static PolicyParams init(const PolicyConfig& config, std::uint64_t seed, double sigma_init,
                             const InitScales& scales = {});

    std::size_t index_of(const std::string& name) const;
    const Tensor& weight(const std::string& name) const { return weights[index_of(name)]; }
    Tensor& weight(const std::string& name) { return weights[index_of(name)]; }
    std::size_t parameter_count() const;
};

enum class PerturbMode { none, all_layers, layer_band, logits_only };

/// Which targets receive noise. Target h < H is the input of block h, target H the logits.
struct PerturbationSpec {
    PerturbMode mode = PerturbMode::none;
    int band_lo = 0;
    int band_hi = 0;

    static PerturbationSpec none() { return {}; }
    static PerturbationSpec all_layers() { return {PerturbMode::all_layers, 0, 0}; }
    static PerturbationSpec logits_only() { return {PerturbMode::logits_only, 0, 0}; }
    static PerturbationSpec layer_band(int lo, int hi) { return {PerturbMode::layer_band, lo, hi}; }

    /// Throws unless the band satisfies 0 <= lo <= hi < n_layers.
    void validate(int n_layers) const;
    bool includes(int target, int n_layers) const;
    std::vector<int> targets(int n_layers) const;
};

std::string to_string(PerturbMode mode);
PerturbMode perturb_mode_from_string(const std::string& name);

/// Identifies a sequence for keyed noise: draws depend on (prompt, sample, position)
/// only, so any prefix or batch layout sees the same values.
struct SequenceKey {
    std::uint64_t prompt = 0;
    std::uint64_t sample = 0;
};

/// Standard normal perturbation draws. Entries are generated on demand from
/// (seed, sequence key, target, position); scaling by sigma happens at injection.
struct PerturbationDraw {
    std::uint64_t seed = 0;
    bool zero = false; // every value is 0 (the pathwise sigma gradient vanishes)

    /// The `width` i.i.d. N(0,1) values for one target at one position.
    std::vector<double> values(SequenceKey key, int target, std::size_t position, std::size_t width) const;
};

/// Mismatch noise and precision loss applied by an inference engine.
struct EngineNoise {
    double zeta_std = 0.0;
    std::uint64_t zeta_seed = 0;
    std::optional<int> round_bits;
};

/// Per-position zeta values shared by the sampler and the replay evaluator.
std::vector<double> zeta_values(std::uint64_t seed, SequenceKey key, std::size_t position, std::size_t width);

/// A batch of equal-length token sequences.
struct SequenceBatch {
    std::size_t length = 0;
    std::vector<int> tokens; // row-major [batch x length]
    std::vector<SequenceKey> keys;

    std::size_t batch() const { return keys.size(); }
};

struct ForwardOptions {
    PerturbationSpec perturb;
    std::optional<PerturbationDraw> draw;
    EngineNoise engine;
    /// When set, receives one [batch*length x d] tensor per block input (after any
    /// injection) followed by the final-norm input.
    std::vector<Tensor>* capture_hidden = nullptr;
};

/// Tape handles for a parameter snapshot. The snapshot must outlive the tape.
struct BoundParams {
    const PolicyParams* params = nullptr;
    std::vector<Var> weights;
    Var log_sigma;
};

BoundParams bind(num::Tape& tape, const PolicyParams& params);

/// Log-softmax next-token distributions at the requested flat rows
/// (sequence * length + position). Row (s, t) predicts token t + 1 of sequence s.
Var forward_log_softmax(const BoundParams& bound, const SequenceBatch& batch,
                        std::span<const std::size_t> rows, const ForwardOptions& options);

/// log pi(a_t | a_<t) for every t in [prompt_len, tokens.size()).
std::vector<double> logprobs(const PolicyParams& params, std::span<const int> tokens, std::size_t prompt_len,
                             const std::optional<PerturbationDraw>& draw, const PerturbationSpec& spec,
                             SequenceKey key = {});

/// Monte-Carlo smoothed policy log( mean_k pi_{theta,sigma}(a_t | prefix, delta_k) ).
/// Draw k uses seed derive_seed(base_seed, {k}); n_samples == 1 uses `base_seed` itself.
std::vector<double> logprobs_smoothed(const PolicyParams& params, std::span<const int> tokens,
                                      std::size_t prompt_len, const PerturbationSpec& spec,
                                      std::size_t n_samples, std::uint64_t base_seed, SequenceKey key = {});

/// Elementwise log of the mean of exp over draws: out[t] = log( mean_k exp(per_draw[k][t]) ).
std::vector<double> log_mean_exp(const std::vector<std::vector<double>>& per_draw);

/// Autoregressive sampling from the unperturbed policy; temperature <= 1e-6 is argmax.
std::vector<int> sample(const PolicyParams& params, std::span<const int> prompt, double temperature,
                        std::size_t max_new, num::Rng& rng);

/// Draws from softmax(log_probs / temperature) given a row of log-probabilities;
/// temperature <= 1e-6 returns the argmax (lowest index on ties).
int sample_token(std::span<const double> log_probs, double temperature, num::Rng& rng);

void save_checkpoint(const PolicyParams& params, const std::filesystem::path& path);
PolicyParams load_checkpoint(const std::filesystem::path& path);

} // namespace alp::policy
