#pragma once

#include "alp/numcore/ops.hpp"
#include "alp/numcore/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

namespace alp::test {

inline num::Tensor uniform_tensor(num::Shape shape, std::uint64_t seed, double lo = -2.0, double hi = 2.0)
{
    num::Tensor t(std::move(shape));
    num::Rng rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    for (double& v : t.data()) {
        v = u(rng);
    }
    return t;
}

// Relative error with an absolute floor so that near-zero gradients compare sanely.
inline double rel_err(double a, double b, double floor = 1e-3)
{
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Builds a scalar from the inputs on `tape`; used for both autodiff and differencing.
using ScalarGraph = std::function<num::Var(num::Tape&, std::vector<num::Var>&)>;

inline double eval_scalar(const ScalarGraph& f, std::vector<num::Tensor> inputs)
{
    num::Tape tape(false);
    std::vector<num::Var> vars;
    for (auto& t : inputs) {
        vars.push_back(tape.leaf(t));
    }
    return f(tape, vars).value().item();
}

// Largest relative error between the tape gradient and central differences over all
// input coordinates.
inline double max_fd_error(const ScalarGraph& f, const std::vector<num::Tensor>& inputs, double h = 1e-5)
{
    num::Tape tape;
    std::vector<num::Var> vars;
    for (const auto& t : inputs) {
        vars.push_back(tape.leaf(t));
    }
    num::Var out = f(tape, vars);
    tape.backward(out, num::Tensor::scalar(1.0));
    double worst = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const num::Tensor g = tape.grad(vars[k]);
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            auto plus = inputs;
            auto minus = inputs;
            plus[k][i] += h;
            minus[k][i] -= h;
            const double fd = (eval_scalar(f, plus) - eval_scalar(f, minus)) / (2.0 * h);
            worst = std::max(worst, rel_err(g[i], fd));
        }
    }
    return worst;
}

} // namespace alp::test
