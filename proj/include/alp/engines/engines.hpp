#pragma once

#include "alp/policy/policy.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace alp::engines {

using policy::PolicyParams;
using policy::SequenceKey;

enum class EngineTag { train, infer, train_perturbed };
std::string to_string(EngineTag tag);

/// Per-response-position log-probabilities under one engine and one parameter version.
struct TokenLogProbs {
    EngineTag tag = EngineTag::train;
    std::vector<double> values;
    std::uint64_t params_version = 0;
};

/// Simulated inference-engine deviation: Gaussian noise on the embedding output and
/// optional mantissa rounding of the logits.
struct MismatchModel {
    double zeta_std = 0.02;
    std::optional<int> round_bits;
    std::uint64_t seed_stream = 0;

    /// Throws std::invalid_argument for zeta_std < 0 or round_bits outside [4, 52].
    void validate() const;
    policy::EngineNoise noise() const;
    bool exact() const { return zeta_std == 0.0 && !round_bits; }
};

/// One sequence to score: log-probs are returned for positions [prompt_len, |tokens|).
struct SequenceRef {
    std::span<const int> tokens;
    std::size_t prompt_len = 1;
    SequenceKey key;
};

/// Sequences bucketed by length so each bucket is one batched forward. Row results do
/// not depend on the bucketing.
struct LengthBucket {
    policy::SequenceBatch batch;
    std::vector<std::size_t> members;       // indices into the input list
    std::vector<std::size_t> rows;          // flat rows, response positions of every member
    std::vector<std::size_t> member_offset; // first row of each member within `rows`
};
std::vector<LengthBucket> bucket_by_length(std::span<const SequenceRef> seqs);

struct EvalRequest {
    EngineTag tag = EngineTag::train;
    policy::ForwardOptions options;
};

std::vector<TokenLogProbs> evaluate(const PolicyParams& params, std::span<const SequenceRef> seqs,
                                    const EvalRequest& request);

TokenLogProbs eval_train(const PolicyParams& params, std::span<const int> tokens, std::size_t prompt_len);
TokenLogProbs eval_infer(const PolicyParams& params, std::span<const int> tokens, std::size_t prompt_len,
                         const MismatchModel& mismatch, SequenceKey key);
TokenLogProbs eval_train_perturbed(const PolicyParams& params, std::span<const int> tokens, std::size_t prompt_len,
                                   const policy::PerturbationSpec& spec, const policy::PerturbationDraw& draw,
                                   SequenceKey key);

/// Token roles inside a response.
enum class Role : std::uint8_t { model = 0, tool = 1, void_turn = 2 };

/// Reaction of an environment to the latest model token.
struct EnvStep {
    std::vector<int> observation; // appended with Role::tool
    bool done = false;
};

/// Interactive environment consulted after every sampled token. Implementations must
/// be pure functions of their arguments.
class Environment {
public:
    virtual ~Environment() = default;
    virtual EnvStep after_model_token(std::span<const int> prompt, std::span<const int> response,
                                      std::span<const Role> roles) const = 0;
};

/// Stops at EOS; no observations.
class SingleTurnEnvironment final : public Environment {
public:
    explicit SingleTurnEnvironment(int eos) : eos_(eos) {}
    EnvStep after_model_token(std::span<const int>, std::span<const int> response,
                              std::span<const Role>) const override
    {
        return {{}, !response.empty() && response.back() == eos_};
    }

private:
    int eos_;
};

struct Prompt {
    std::uint64_t id = 0;
    std::vector<int> tokens;
};

struct Response {
    std::uint64_t prompt_id = 0;
    std::uint64_t sample_id = 0;
    std::vector<int> prompt;
    std::vector<int> tokens; // response tokens after the prompt
    std::vector<double> infer_logprobs;
    std::vector<Role> roles;
    double reward = 0.0;
    double advantage = 0.0;
    bool finished = false; // environment signalled completion before the length budget

    SequenceKey key() const { return {prompt_id, sample_id}; }
    std::vector<int> full_sequence() const;
};

struct RolloutConfig {
    std::size_t group_size = 8;
    double temperature = 1.0;
    std::size_t max_new = 4;
    std::size_t workers = 1;
    std::uint64_t seed = 0;
};

/// Responses grouped per prompt: responses[p * group_size + j] is sample j of prompt p.
struct RolloutBatch {
    static constexpr int kSchemaVersion = 1;
    std::uint64_t params_version = 0;
    std::size_t group_size = 0;
    MismatchModel mismatch;
    std::vector<Response> responses;

    std::size_t group_count() const { return group_size == 0 ? 0 : responses.size() / group_size; }
};

/// Samples group_size responses per prompt from the inference engine, recording its
/// temperature-1 log-probs for every response token. Each response draws from an RNG
/// keyed by (seed, prompt id, sample id), so the result does not depend on `workers`.
RolloutBatch rollout(const PolicyParams& params_old, const MismatchModel& mismatch, std::span<const Prompt> prompts,
                     const RolloutConfig& config, const Environment& env);

void write_jsonl(const RolloutBatch& batch, std::ostream& out);
RolloutBatch read_jsonl(std::istream& in);

} // namespace alp::engines
