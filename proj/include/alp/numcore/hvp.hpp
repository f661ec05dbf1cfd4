#pragma once

#include "alp/numcore/tensor.hpp"

#include <cstddef>
#include <functional>

namespace alp::num {

/// Gradient oracle: returns grad f(theta). Must be deterministic in theta.
using GradientFn = std::function<Tensor(const Tensor& theta)>;

/// Central finite difference of gradients, (g(theta + h v) - g(theta - h v)) / 2h.
/// Throws if h * |v|_inf sits below the round-off floor of theta, or if a gradient is
/// non-finite.
Tensor hvp(const GradientFn& grad, const Tensor& theta, const Tensor& v, double h = 1e-4);

struct PowerIterationResult {
    double spectral_norm = 0.0;
    Tensor vector;
    std::size_t iterations = 0;
};

/// Power iteration on v -> H v, estimating max |eigenvalue| of a symmetric operator.
/// Converged when successive estimates differ by at most rel_tol (relative).
PowerIterationResult power_iteration(const std::function<Tensor(const Tensor&)>& apply, const Tensor& start,
                                     double rel_tol = 1e-10, std::size_t max_iter = 200);

double norm2(const Tensor& x);
double norm_inf(const Tensor& x);

} // namespace alp::num
