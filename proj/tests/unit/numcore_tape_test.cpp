#include "alp/numcore/ops.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace alp::num;
using alp::test::uniform_tensor;

TEST(Tape, GradientOfSumIsOnes)
{
    Tape tape;
    Var x = tape.leaf(uniform_tensor({2, 3}, 1));
    tape.backward(sum(x), Tensor::scalar(1.0));
    const Tensor g_x = tape.grad(x);
    for (double g : g_x.data()) {
        EXPECT_EQ(g, 1.0);
    }
}

TEST(Tape, GradientOfSquareAtThree)
{
    Tape tape;
    Var x = tape.leaf(Tensor::scalar(3.0));
    tape.backward(mul(x, x), Tensor::scalar(1.0));
    EXPECT_EQ(tape.grad(x).item(), 6.0);
}

TEST(Tape, MisuseIsReported)
{
    Tape tape;
    Var x = tape.leaf(Tensor::vector({1.0, 2.0}));
    EXPECT_THROW(tape.grad(x), std::logic_error);
    EXPECT_THROW(tape.backward(x, Tensor::scalar(1.0)), ShapeError);
    Tape empty;
    Tape other;
    Var y = other.leaf(Tensor::scalar(1.0));
    EXPECT_THROW(empty.backward(y, Tensor::scalar(1.0)), std::logic_error);
    Tape frozen(false);
    Var z = frozen.leaf(Tensor::scalar(1.0));
    EXPECT_THROW(frozen.backward(z, Tensor::scalar(1.0)), std::logic_error);
}

TEST(Tape, SingleUse)
{
    Tape tape;
    Var x = tape.leaf(Tensor::scalar(2.0));
    Var y = mul(x, x);
    tape.backward(y, Tensor::scalar(1.0));
    EXPECT_THROW(tape.backward(y, Tensor::scalar(1.0)), std::logic_error);
    EXPECT_THROW(mul(x, x), std::logic_error);
}

namespace {

// Random DAG over a pool of matrices; every new node consumes earlier ones.
Var random_graph(Tape&, std::vector<Var> pool, std::uint64_t seed)
{
    Rng rng(seed);
    for (int step = 0; step < 12; ++step) {
        const Var a = pool[rng() % pool.size()];
        const Var b = pool[rng() % pool.size()];
        switch (rng() % 4) {
        case 0: pool.push_back(add(a, b)); break;
        case 1: pool.push_back(mul(a, b)); break;
        case 2: pool.push_back(gelu(a)); break;
        default: pool.push_back(softmax_rows(a)); break;
        }
    }
    return pool.back();
}

} // namespace

TEST(TapeProperty, VisitsNodesInReverseCreationOrder)
{
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Tape tape;
        std::vector<Var> leaves{tape.leaf(uniform_tensor({2, 3}, seed)), tape.leaf(uniform_tensor({2, 3}, seed + 99))};
        Var out = random_graph(tape, leaves, seed);
        tape.backward(out, uniform_tensor({2, 3}, seed + 7));
        const auto& order = tape.visit_order();
        for (std::size_t i = 1; i < order.size(); ++i) {
            EXPECT_GT(order[i - 1], order[i]);
        }
    }
}

TEST(TapeProperty, GradientIsLinearInTheSeed)
{
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto x0 = uniform_tensor({2, 3}, seed);
        const auto x1 = uniform_tensor({2, 3}, seed + 1000);
        const auto s1 = uniform_tensor({2, 3}, seed + 1);
        const auto s2 = uniform_tensor({2, 3}, seed + 2);
        auto grad_for = [&](const Tensor& s) {
            Tape tape;
            std::vector<Var> leaves{tape.leaf(x0), tape.leaf(x1)};
            Var out = random_graph(tape, leaves, seed);
            tape.backward(out, s);
            return tape.grad(leaves[0]);
        };
        Tensor both = s1;
        for (std::size_t i = 0; i < both.size(); ++i) {
            both[i] += s2[i];
        }
        const Tensor g1 = grad_for(s1), g2 = grad_for(s2), g12 = grad_for(both);
        for (std::size_t i = 0; i < g12.size(); ++i) {
            EXPECT_NEAR(g12[i], g1[i] + g2[i], 1e-10 * (1.0 + std::abs(g12[i])));
        }
    }
}

TEST(TapeProperty, BackwardIsBitDeterministic)
{
    auto run = [] {
        Tape tape;
        std::vector<Var> leaves{tape.leaf(uniform_tensor({2, 3}, 5)), tape.leaf(uniform_tensor({2, 3}, 6))};
        Var out = random_graph(tape, leaves, 77);
        tape.backward(out, uniform_tensor({2, 3}, 8));
        return std::pair{tape.grad(leaves[0]), tape.grad(leaves[1])};
    };
    const auto a = run();
    const auto b = run();
    EXPECT_TRUE(a.first.identical(b.first));
    EXPECT_TRUE(a.second.identical(b.second));
}

TEST(Tape, NoGradModeComputesIdenticalValues)
{
    auto run = [](bool record) {
        Tape tape(record);
        std::vector<Var> leaves{tape.leaf(uniform_tensor({2, 3}, 5)), tape.leaf(uniform_tensor({2, 3}, 6))};
        return random_graph(tape, leaves, 77).value();
    };
    EXPECT_TRUE(run(true).identical(run(false)));
}
