#include "alp/tasks/tasks.hpp"

#include "alp/numcore/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <ostream>
#include <random>
#include <stdexcept>

namespace alp::tasks {

std::string to_string(TaskKind kind)
{
    switch (kind) {
    case TaskKind::copy_reverse:
        return "copy-reverse";
    case TaskKind::modular_sum:
        return "modular-sum";
    case TaskKind::multi_turn_calc:
        return "multi-turn-calc";
    }
    return "?";
}

TaskKind task_kind_from_string(const std::string& name)
{
    for (auto k : {TaskKind::copy_reverse, TaskKind::modular_sum, TaskKind::multi_turn_calc}) {
        if (to_string(k) == name) {
            return k;
        }
    }
    throw std::invalid_argument("unknown task kind '" + name + "'");
}

void TaskSpec::validate() const
{
    if (vocab_size <= tok::kValue0 + 1) {
        throw std::invalid_argument("vocabulary of " + std::to_string(vocab_size) + " leaves no room for values");
    }
    switch (kind) {
    case TaskKind::modular_sum:
    case TaskKind::multi_turn_calc:
        if (modulus < 2 || modulus > value_count()) {
            throw std::invalid_argument("modulus " + std::to_string(modulus) + " needs " + std::to_string(modulus) +
                                        " value tokens, vocabulary provides " + std::to_string(value_count()));
        }
        break;
    case TaskKind::copy_reverse:
        if (min_content < 1 || min_content > max_content || max_content > answer_len) {
            throw std::invalid_argument("copy-reverse needs 1 <= min_content <= max_content <= answer_len");
        }
        break;
    }
    if (answer_len < 1 || max_turns < 1 || max_new < 1) {
        throw std::invalid_argument("answer_len, max_turns and max_new must be positive");
    }
}

int TaskSpec::value_token(int v) const
{
    if (v < 0 || v >= value_count()) {
        throw std::out_of_range("value " + std::to_string(v) + " has no token");
    }
    return tok::kValue0 + v;
}

std::optional<int> TaskSpec::token_value(int token) const
{
    if (token >= tok::kValue0 && token < vocab_size) {
        return token - tok::kValue0;
    }
    return std::nullopt;
}

std::size_t TaskSpec::response_budget() const
{
    return static_cast<std::size_t>(kind == TaskKind::multi_turn_calc ? max_new : answer_len);
}

std::string TaskSpec::symbol(int token) const
{
    static const char* names[] = {"<bos>", "<eos>", "<call>", "<result>", "<answer>", "<error>", "+", "*", "="};
    if (token >= 0 && token < tok::kValue0) {
        return names[token];
    }
    if (auto v = token_value(token)) {
        return std::to_string(*v);
    }
    return "<?>";
}

std::vector<Prompt> gen_prompts(const TaskSpec& spec, std::size_t count, std::uint64_t seed)
{
    spec.validate();
    if (count == 0) {
        throw std::invalid_argument("gen_prompts needs count >= 1");
    }
    std::vector<Prompt> out;
    for (std::size_t i = 0; i < count; ++i) {
        num::Rng rng = num::keyed_rng(seed, {0x7461736bULL, i});
        auto draw = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
        Prompt p;
        p.id = i;
        p.tokens.push_back(tok::kBos);
        switch (spec.kind) {
        case TaskKind::modular_sum:
            p.tokens.push_back(spec.value_token(draw(0, spec.modulus - 1)));
            p.tokens.push_back(tok::kPlus);
            p.tokens.push_back(spec.value_token(draw(0, spec.modulus - 1)));
            break;
        case TaskKind::copy_reverse: {
            const int len = draw(spec.min_content, spec.max_content);
            for (int k = 0; k < len; ++k) {
                p.tokens.push_back(spec.value_token(draw(0, spec.value_count() - 1)));
            }
            break;
        }
        case TaskKind::multi_turn_calc:
            for (int k = 0; k < 3; ++k) {
                if (k > 0) {
                    p.tokens.push_back(tok::kPlus);
                }
                p.tokens.push_back(spec.value_token(draw(0, spec.modulus - 1)));
            }
            break;
        }
        p.tokens.push_back(tok::kEq);
        out.push_back(std::move(p));
    }
    return out;
}

namespace {

// Value tokens between BOS and EQ, ignoring operators.
std::vector<int> prompt_values(const TaskSpec& spec, std::span<const int> prompt)
{
    std::vector<int> values;
    for (int t : prompt) {
        if (auto v = spec.token_value(t)) {
            values.push_back(*v);
        }
    }
    return values;
}

// Half-open [begin, end) token ranges of the model turns, each closed by EOS or the end.
struct Turn {
    std::size_t begin;
    std::size_t end; // exclusive, includes the EOS if present
};

std::vector<Turn> model_turns(std::span<const int> response, std::span<const Role> roles)
{
    std::vector<Turn> turns;
    std::size_t i = 0;
    while (i < response.size()) {
        if (!roles.empty() && roles[i] == Role::tool) {
            ++i;
            continue;
        }
        const std::size_t begin = i;
        while (i < response.size() && (roles.empty() || roles[i] != Role::tool) && response[i] != tok::kEos) {
            ++i;
        }
        if (i < response.size() && response[i] == tok::kEos) {
            ++i;
        }
        turns.push_back({begin, i});
    }
    return turns;
}

} // namespace

std::vector<int> reference_answer(const TaskSpec& spec, std::span<const int> prompt)
{
    const auto values = prompt_values(spec, prompt);
    switch (spec.kind) {
    case TaskKind::modular_sum:
    case TaskKind::multi_turn_calc: {
        int s = 0;
        for (int v : values) {
            s = (s + v) % spec.modulus;
        }
        return {spec.value_token(s)};
    }
    case TaskKind::copy_reverse: {
        std::vector<int> r;
        for (auto it = values.rbegin(); it != values.rend(); ++it) {
            r.push_back(spec.value_token(*it));
        }
        return r;
    }
    }
    return {};
}

std::vector<int> step_tool(const TaskSpec& spec, std::span<const int> expr)
{
    // value ((PLUS | TIMES) value)*, TIMES binding tighter, arithmetic mod m.
    const auto m = static_cast<long long>(spec.modulus);
    bool ok = !expr.empty() && expr.size() % 2 == 1;
    long long total = 0, term = 0;
    for (std::size_t i = 0; ok && i < expr.size(); ++i) {
        if (i % 2 == 0) {
            const auto v = spec.token_value(expr[i]);
            ok = v.has_value();
            if (!ok) {
                break;
            }
            term = i == 0 || expr[i - 1] == tok::kPlus ? *v % m : (term * *v) % m;
        } else {
            ok = expr[i] == tok::kPlus || expr[i] == tok::kTimes;
            if (ok && expr[i] == tok::kPlus) {
                total = (total + term) % m;
            }
        }
    }
    if (!ok) {
        return {tok::kToolResult, tok::kError};
    }
    total = (total + term) % m;
    return {tok::kToolResult, spec.value_token(static_cast<int>(total))};
}

double verify(const TaskSpec& spec, std::span<const int> prompt, std::span<const int> response)
{
    const auto want = reference_answer(spec, prompt);
    if (spec.kind != TaskKind::multi_turn_calc) {
        const auto eos = std::find(response.begin(), response.end(), tok::kEos);
        return std::equal(response.begin(), eos, want.begin(), want.end()) ? 1.0 : 0.0;
    }
    // Tool observations always follow a closed TOOL_CALL turn as [TOOL_RESULT, x]; skip them.
    std::size_t i = 0;
    while (i < response.size()) {
        const std::size_t begin = i;
        while (i < response.size() && response[i] != tok::kEos) {
            ++i;
        }
        const std::size_t end = i;
        if (i < response.size()) {
            ++i;
        }
        if (end > begin && response[begin] == tok::kAnswer) {
            return std::equal(response.begin() + static_cast<std::ptrdiff_t>(begin + 1),
                              response.begin() + static_cast<std::ptrdiff_t>(end), want.begin(), want.end())
                       ? 1.0
                       : 0.0;
        }
        if (end > begin && response[begin] == tok::kToolCall && i < response.size() &&
            response[i] == tok::kToolResult) {
            i = std::min(response.size(), i + 2);
        }
    }
    return 0.0;
}

std::vector<Role> turn_mask(const TaskSpec& spec, std::span<const int> response, std::span<const Role> roles)
{
    if (roles.size() != response.size()) {
        throw std::invalid_argument("turn_mask: roles and tokens differ in length");
    }
    std::vector<Role> out(roles.begin(), roles.end());
    if (spec.kind != TaskKind::multi_turn_calc) {
        return out;
    }
    for (const Turn& t : model_turns(response, roles)) {
        const int head = response[t.begin];
        if (head != tok::kToolCall && head != tok::kAnswer) {
            for (std::size_t i = t.begin; i < t.end; ++i) {
                out[i] = Role::void_turn;
            }
        }
    }
    return out;
}

engines::EnvStep TaskEnvironment::after_model_token(std::span<const int>, std::span<const int> response,
                                                    std::span<const Role> roles) const
{
    if (response.empty() || response.back() != tok::kEos) {
        return {};
    }
    if (spec_.kind != TaskKind::multi_turn_calc) {
        return {{}, true};
    }
    const auto turns = model_turns(response, roles);
    const Turn& last = turns.back();
    const int head = response[last.begin];
    if (head == tok::kAnswer) {
        return {{}, true};
    }
    const bool limit = turns.size() >= static_cast<std::size_t>(spec_.max_turns);
    if (head == tok::kToolCall) {
        auto obs = step_tool(spec_, response.subspan(last.begin + 1, last.end - last.begin - 2));
        return {std::move(obs), limit};
    }
    return {{}, limit};
}

void score_batch(const TaskSpec& spec, engines::RolloutBatch& batch)
{
    for (auto& r : batch.responses) {
        r.reward = verify(spec, r.prompt, r.tokens);
        r.roles = turn_mask(spec, r.tokens, r.roles);
    }
}

void write_prompts_jsonl(std::span<const Prompt> prompts, std::ostream& out)
{
    for (const Prompt& p : prompts) {
        nlohmann::ordered_json rec;
        rec["schema_version"] = engines::RolloutBatch::kSchemaVersion;
        rec["prompt_id"] = p.id;
        rec["prompt"] = p.tokens;
        out << rec.dump() << '\n';
    }
}

} // namespace alp::tasks
