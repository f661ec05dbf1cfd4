#pragma once

#include "alp/engines/engines.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace alp::tasks {

using engines::Prompt;
using engines::Role;

/// Reserved token ids; value v is encoded as kValue0 + v.
namespace tok {
inline constexpr int kBos = 0;
inline constexpr int kEos = 1;
inline constexpr int kToolCall = 2;
inline constexpr int kToolResult = 3;
inline constexpr int kAnswer = 4;
inline constexpr int kError = 5;
inline constexpr int kPlus = 6;
inline constexpr int kTimes = 7;
inline constexpr int kEq = 8;
inline constexpr int kValue0 = 9;
} // namespace tok

enum class TaskKind { copy_reverse, modular_sum, multi_turn_calc };
std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& name);

struct TaskSpec {
    TaskKind kind = TaskKind::modular_sum;
    int modulus = 17;
    int vocab_size = 32;
    int min_content = 2; // copy-reverse content length range
    int max_content = 4;
    int answer_len = 1;  // response budget for single-turn tasks
    int max_turns = 3;   // multi-turn only
    int max_new = 20;    // multi-turn token budget including tool observations

    /// Throws std::invalid_argument when the vocabulary cannot encode the task.
    void validate() const;
    int value_count() const { return vocab_size - tok::kValue0; }
    int value_token(int v) const;
    std::optional<int> token_value(int token) const;
    /// Response length budget used by the sampler.
    std::size_t response_budget() const;
    std::string symbol(int token) const;
};

/// Deterministic prompts: prompt i depends only on (spec, seed, i).
std::vector<Prompt> gen_prompts(const TaskSpec& spec, std::size_t count, std::uint64_t seed);

/// The unique correct answer segment for a prompt.
std::vector<int> reference_answer(const TaskSpec& spec, std::span<const int> prompt);

/// 1 iff the answer segment of the response matches the reference exactly.
/// Single-turn: the segment is the response up to its first EOS. Multi-turn: the content
/// of the first turn opened by ANSWER.
double verify(const TaskSpec& spec, std::span<const int> prompt, std::span<const int> response);

/// Evaluates the expression in a TOOL_CALL turn (`expr` excludes the marker and EOS).
/// Returns [TOOL_RESULT, value] or [TOOL_RESULT, ERROR] for a malformed expression.
std::vector<int> step_tool(const TaskSpec& spec, std::span<const int> expr);

/// Relabels every model token of a turn that neither calls the tool nor answers as
/// Role::void_turn. Tool observations stay Role::tool.
std::vector<Role> turn_mask(const TaskSpec& spec, std::span<const int> response, std::span<const Role> roles);

/// Rollout environment for a task.
class TaskEnvironment final : public engines::Environment {
public:
    explicit TaskEnvironment(TaskSpec spec) : spec_(std::move(spec)) { spec_.validate(); }
    engines::EnvStep after_model_token(std::span<const int> prompt, std::span<const int> response,
                                       std::span<const Role> roles) const override;

private:
    TaskSpec spec_;
};

/// Scores responses and relabels void turns in place.
void score_batch(const TaskSpec& spec, engines::RolloutBatch& batch);

/// Prompt set as JSON lines with the rollout record field names.
void write_prompts_jsonl(std::span<const Prompt> prompts, std::ostream& out);

} // namespace alp::tasks
