#include "alp/numcore/hvp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace alp::num {

double norm2(const Tensor& x)
{
    double s = 0.0;
    for (double v : x.data()) {
        s += v * v;
    }
    return std::sqrt(s);
}

double norm_inf(const Tensor& x)
{
    double m = 0.0;
    for (double v : x.data()) {
        m = std::max(m, std::abs(v));
    }
    return m;
}

Tensor hvp(const GradientFn& grad, const Tensor& theta, const Tensor& v, double h)
{
    require_same_shape(theta, v, "hvp direction");
    const double floor = 1e3 * std::numeric_limits<double>::epsilon() * std::max(1.0, norm_inf(theta));
    if (!(h > 0.0) || h * norm_inf(v) <= floor) {
        throw std::invalid_argument("hvp: step " + std::to_string(h) + " is below the precision floor");
    }
    Tensor plus = theta, minus = theta;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        plus[i] += h * v[i];
        minus[i] -= h * v[i];
    }
    const Tensor gp = grad(plus);
    const Tensor gm = grad(minus);
    require_same_shape(theta, gp, "hvp gradient");
    require_same_shape(theta, gm, "hvp gradient");
    require_finite(gp.data(), "hvp gradient");
    require_finite(gm.data(), "hvp gradient");
    Tensor out(theta.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = (gp[i] - gm[i]) / (2.0 * h);
    }
    return out;
}

PowerIterationResult power_iteration(const std::function<Tensor(const Tensor&)>& apply, const Tensor& start,
                                     double rel_tol, std::size_t max_iter)
{
    double n0 = norm2(start);
    if (!(n0 > 0.0)) {
        throw std::invalid_argument("power_iteration: zero start vector");
    }
    PowerIterationResult r;
    r.vector = start;
    for (double& x : r.vector.data()) {
        x /= n0;
    }
    double prev = -1.0;
    for (std::size_t it = 1; it <= max_iter; ++it) {
        Tensor w = apply(r.vector);
        require_finite(w.data(), "power_iteration");
        const double est = norm2(w);
        r.iterations = it;
        r.spectral_norm = est;
        if (est == 0.0) {
            return r;
        }
        for (double& x : w.data()) {
            x /= est;
        }
        r.vector = std::move(w);
        if (prev >= 0.0 && std::abs(est - prev) <= rel_tol * est) {
            return r;
        }
        prev = est;
    }
    throw std::runtime_error("power_iteration: no convergence after " + std::to_string(max_iter) + " iterations");
}

} // namespace alp::num
