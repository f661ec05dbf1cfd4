#include "alp/tasks/tasks.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace alp;
using namespace alp::tasks;

namespace {

TaskSpec modsum(int m = 17)
{
    TaskSpec s;
    s.kind = TaskKind::modular_sum;
    s.modulus = m;
    return s;
}

TaskSpec calc()
{
    TaskSpec s;
    s.kind = TaskKind::multi_turn_calc;
    return s;
}

int V(int v) { return tok::kValue0 + v; }

} // namespace

TEST(Tasks, CopyReverseTarget)
{
    TaskSpec s;
    s.kind = TaskKind::copy_reverse;
    s.answer_len = 4;
    const std::vector<int> prompt{tok::kBos, V(1), V(2), V(3), tok::kEq};
    EXPECT_EQ(reference_answer(s, prompt), (std::vector<int>{V(3), V(2), V(1)}));
    const std::vector<int> resp{V(3), V(2), V(1), tok::kEos};
    EXPECT_EQ(verify(s, prompt, resp), 1.0);
    const std::vector<int> partial{V(3), V(2), tok::kEos, V(1)};
    EXPECT_EQ(verify(s, prompt, partial), 0.0);
}

TEST(Tasks, ModularSumTarget)
{
    const auto s = modsum(7);
    const std::vector<int> prompt{tok::kBos, V(3), tok::kPlus, V(6), tok::kEq};
    EXPECT_EQ(reference_answer(s, prompt), std::vector<int>{V(2)});
    EXPECT_EQ(verify(s, prompt, std::vector<int>{V(2)}), 1.0);
    EXPECT_EQ(verify(s, prompt, std::vector<int>{}), 0.0);
    EXPECT_EQ(verify(s, prompt, std::vector<int>{V(3)}), 0.0);
}

TEST(Tasks, PromptsAreDeterministicAndSeedDependent)
{
    const auto s = modsum();
    auto ser = [&](std::uint64_t seed) {
        std::ostringstream os;
        write_prompts_jsonl(gen_prompts(s, 1000, seed), os);
        return os.str();
    };
    EXPECT_EQ(ser(5), ser(5));
    EXPECT_NE(ser(5), ser(6));
    EXPECT_THROW(gen_prompts(s, 0, 1), std::invalid_argument);
    auto tiny = modsum(30);
    EXPECT_THROW(gen_prompts(tiny, 1, 1), std::invalid_argument);
}

TEST(Tasks, RewardMatchesBruteForceArithmetic)
{
    const auto s = modsum();
    const auto prompts = gen_prompts(s, 300, 3);
    for (const auto& p : prompts) {
        const int x = p.tokens[1] - tok::kValue0, y = p.tokens[3] - tok::kValue0;
        for (int guess = 0; guess < 17; ++guess) {
            const std::vector<int> resp{V(guess)};
            EXPECT_EQ(verify(s, p.tokens, resp), guess == (x + y) % 17 ? 1.0 : 0.0);
        }
    }
}

TEST(Tasks, CalculatorTool)
{
    const auto s = calc();
    EXPECT_EQ(step_tool(s, std::vector<int>{V(2), tok::kPlus, V(3)}), (std::vector<int>{tok::kToolResult, V(5)}));
    EXPECT_EQ(step_tool(s, std::vector<int>{V(2), tok::kPlus, V(3), tok::kTimes, V(4)}),
              (std::vector<int>{tok::kToolResult, V(14)}));
    EXPECT_EQ(step_tool(s, std::vector<int>{V(2), tok::kPlus}), (std::vector<int>{tok::kToolResult, tok::kError}));
    EXPECT_EQ(step_tool(s, std::vector<int>{}), (std::vector<int>{tok::kToolResult, tok::kError}));
}

TEST(Tasks, VoidTurnsAreMasked)
{
    const auto s = calc();
    using R = Role;
    const std::vector<int> resp{V(1), V(2), tok::kEos, tok::kAnswer, V(5), tok::kEos};
    const std::vector<R> roles(resp.size(), R::model);
    const auto mask = turn_mask(s, resp, roles);
    EXPECT_EQ(mask, (std::vector<R>{R::void_turn, R::void_turn, R::void_turn, R::model, R::model, R::model}));
}

TEST(Tasks, TwoTurnEpisodeThroughEnvironment)
{
    // Prompt 4 + 9 + 10 = 23 = 6 mod 17. The model asks the tool for 4+9, then answers 13+10.
    const auto s = calc();
    const TaskEnvironment env(s);
    const std::vector<int> prompt{tok::kBos, V(4), tok::kPlus, V(9), tok::kPlus, V(10), tok::kEq};
    std::vector<int> resp;
    std::vector<Role> roles;
    auto emit = [&](int t) {
        resp.push_back(t);
        roles.push_back(Role::model);
        auto step = env.after_model_token(prompt, resp, roles);
        for (int o : step.observation) {
            resp.push_back(o);
            roles.push_back(Role::tool);
        }
        return step.done;
    };
    for (int t : {tok::kToolCall, V(4), tok::kPlus, V(9)}) EXPECT_FALSE(emit(t));
    EXPECT_FALSE(emit(tok::kEos));
    ASSERT_EQ(resp.size(), 7u);
    EXPECT_EQ(resp[5], tok::kToolResult);
    EXPECT_EQ(resp[6], V(13));
    for (int t : {tok::kAnswer, V(6)}) EXPECT_FALSE(emit(t));
    EXPECT_TRUE(emit(tok::kEos));
    EXPECT_EQ(verify(s, prompt, resp), 1.0);
    const auto mask = turn_mask(s, resp, roles);
    EXPECT_EQ(mask[5], Role::tool);
    EXPECT_EQ(mask[6], Role::tool);
    EXPECT_EQ(std::count(mask.begin(), mask.end(), Role::void_turn), 0);
}

TEST(Tasks, TurnLimitEndsEpisode)
{
    auto s = calc();
    s.max_turns = 2;
    const TaskEnvironment env(s);
    const std::vector<int> prompt{tok::kBos, V(1), tok::kPlus, V(1), tok::kPlus, V(1), tok::kEq};
    const std::vector<int> resp{V(1), tok::kEos, V(2), tok::kEos};
    const std::vector<Role> roles(resp.size(), Role::model);
    EXPECT_FALSE(env.after_model_token(prompt, std::span(resp).first(2), std::span(roles).first(2)).done);
    EXPECT_TRUE(env.after_model_token(prompt, resp, roles).done);
}

TEST(TasksProperty, VerifyIsPure)
{
    const auto s = calc();
    const auto prompts = gen_prompts(s, 50, 9);
    num::Rng rng(4);
    for (const auto& p : prompts) {
        std::vector<int> resp(8);
        for (int& t : resp) t = static_cast<int>(rng() % 32);
        EXPECT_EQ(verify(s, p.tokens, resp), verify(s, p.tokens, resp));
    }
}

TEST(Tasks, RandomPolicyReachesNonzeroPassAtLargeK)
{
    // Uniform guesses over the answer space solve every prompt with high probability at large k.
    const auto s = modsum();
    const auto prompts = gen_prompts(s, 20, 1);
    num::Rng rng(8);
    int solved = 0;
    for (const auto& p : prompts) {
        bool hit = false;
        for (int k = 0; k < 64 && !hit; ++k) {
            const std::vector<int> resp{V(static_cast<int>(rng() % 17))};
            hit = verify(s, p.tokens, resp) == 1.0;
        }
        solved += hit;
    }
    EXPECT_GT(solved, 0);
}
