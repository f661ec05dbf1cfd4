#include "alp/theorylab/theorylab.hpp"

#include "alp/numcore/hvp.hpp"
#include "alp/numcore/rng.hpp"
#include "alp/numcore/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <stdexcept>

namespace alp::theorylab {

namespace {

constexpr std::uint64_t kPointStream = 0x78707473;   // "xpts"
constexpr std::uint64_t kDeltaStream = 0x64656c74;   // "delt"
constexpr std::uint64_t kZetaStream = 0x7a657461;    // "zeta"

void require(bool ok, const char* what)
{
    if (!ok) {
        throw std::invalid_argument(what);
    }
}

double dot(std::span<const double> a, std::span<const double> b)
{
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

/// Running mean and variance (Welford).
struct Moments {
    std::size_t n = 0;
    double mean = 0.0;
    double m2 = 0.0;

    void add(double v)
    {
        ++n;
        const double d = v - mean;
        mean += d / static_cast<double>(n);
        m2 += d * (v - mean);
    }
    double se() const { return n > 1 ? std::sqrt(m2 / static_cast<double>(n - 1) / static_cast<double>(n)) : 0.0; }
};

/// Monte-Carlo pi_s(a|x) and the unnormalized posterior first moment sum_k pi(a|x+delta_k) delta_k.
struct SmoothedStats {
    Vec pi_s;     // [a]
    Vec post;     // [a * dim + i], E_q[delta]
};

SmoothedStats smoothed_stats(const OneLayerModel& m, std::span<const double> x, double sigma, std::size_t n,
                             std::uint64_t seed)
{
    const std::size_t A = m.actions(), d = m.dim();
    num::GaussianStream g(seed);
    Vec xd(d), logit(A), mass(A, 0.0), moment(A * d, 0.0), delta(d);
    for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t i = 0; i < d; ++i) {
            delta[i] = sigma * g();
            xd[i] = x[i] + delta[i];
        }
        m.logits(xd, logit);
        const Vec p = softmax(logit);
        for (std::size_t a = 0; a < A; ++a) {
            mass[a] += p[a];
            for (std::size_t i = 0; i < d; ++i) {
                moment[a * d + i] += p[a] * delta[i];
            }
        }
    }
    SmoothedStats s;
    s.pi_s.resize(A);
    s.post.resize(A * d);
    for (std::size_t a = 0; a < A; ++a) {
        if (!(mass[a] > 0.0) || !std::isnormal(mass[a] / static_cast<double>(n))) {
            throw std::runtime_error("theorylab: smoothed policy underflows for action " + std::to_string(a));
        }
        s.pi_s[a] = mass[a] / static_cast<double>(n);
        for (std::size_t i = 0; i < d; ++i) {
            s.post[a * d + i] = moment[a * d + i] / mass[a];
        }
    }
    return s;
}

Conditions conditions_from(const OneLayerModel& m, std::span<const double> x, const SmoothedStats& s, double sigma)
{
    const std::size_t d = m.dim();
    const Vec p = m.probs(x);
    Conditions c{1.0, 0.0};
    for (std::size_t a = 0; a < m.actions(); ++a) {
        c.alpha = std::min(c.alpha, p[a] / s.pi_s[a]);
        const auto mu = std::span<const double>(s.post).subspan(a * d, d);
        c.C = std::max(c.C, dot(mu, mu) / (static_cast<double>(d) * sigma * sigma));
    }
    return c;
}

double categorical_kl(std::span<const double> p, std::span<const double> log_q)
{
    double s = 0.0;
    for (std::size_t a = 0; a < p.size(); ++a) {
        if (p[a] > 0.0) {
            s += p[a] * (std::log(p[a]) - log_q[a]);
        }
    }
    return s;
}

} // namespace

Vec softmax(std::span<const double> logits)
{
    require(!logits.empty(), "softmax: empty logits");
    const double mx = *std::max_element(logits.begin(), logits.end());
    Vec p(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp(logits[i] - mx);
        z += p[i];
    }
    for (double& v : p) {
        v /= z;
    }
    return p;
}

Vec log_softmax(std::span<const double> logits)
{
    require(!logits.empty(), "log_softmax: empty logits");
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) {
        z += std::exp(l - mx);
    }
    const double lz = mx + std::log(z);
    Vec out(logits.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = logits[i] - lz;
    }
    return out;
}

OneLayerModel::OneLayerModel(std::size_t actions, std::size_t dim, Vec W) : actions_(actions), dim_(dim), W_(std::move(W))
{
    require(actions >= 2 && dim >= 1, "OneLayerModel: need at least two actions and one input dimension");
    require(W_.size() == actions * dim, "OneLayerModel: W size does not match actions x dim");
    require(std::all_of(W_.begin(), W_.end(), [](double w) { return std::isfinite(w); }),
            "OneLayerModel: non-finite weight");
}

OneLayerModel OneLayerModel::random(std::size_t actions, std::size_t dim, std::uint64_t seed, double scale)
{
    num::GaussianStream g(seed);
    Vec W(actions * dim);
    for (double& w : W) {
        w = scale * g();
    }
    return OneLayerModel(actions, dim, std::move(W));
}

void OneLayerModel::logits(std::span<const double> x, std::span<double> out) const
{
    if (x.size() != dim_ || out.size() != actions_) {
        throw std::invalid_argument("OneLayerModel::logits: size mismatch");
    }
    for (std::size_t a = 0; a < actions_; ++a) {
        out[a] = dot(row(a), x);
    }
}

Vec OneLayerModel::probs(std::span<const double> x) const
{
    Vec l(actions_);
    logits(x, l);
    return softmax(l);
}

Vec OneLayerModel::log_probs(std::span<const double> x) const
{
    Vec l(actions_);
    logits(x, l);
    return log_softmax(l);
}

std::vector<Vec> gaussian_points(std::size_t count, std::size_t dim, std::uint64_t seed)
{
    num::GaussianStream g(num::derive_seed(seed, {kPointStream}));
    std::vector<Vec> pts(count, Vec(dim));
    for (auto& p : pts) {
        for (double& v : p) {
            v = g();
        }
    }
    return pts;
}

// ---------------------------------------------------------------------------------------

SteinResult stein_check(const OneLayerModel& m, std::span<const double> x, double sigma, std::size_t n_mc,
                        std::uint64_t seed, double fd_step)
{
    require(sigma > 0.0 && std::isfinite(sigma), "stein_check: sigma must be positive");
    require(n_mc >= 10'000, "stein_check: n_mc must be at least 1e4");
    require(fd_step > 0.0, "stein_check: fd_step must be positive");
    require(x.size() == m.dim(), "stein_check: x has the wrong dimension");
    const std::size_t A = m.actions(), d = m.dim(), AD = A * d;
    const double inv_s2 = 1.0 / (sigma * sigma);
    const double n = static_cast<double>(n_mc);

    // Per draw: p[a], g[a,i] (finite-difference slope of pi), u[a,i] = p[a] delta_i / sigma^2.
    Vec xd(d), xs(d), logit(A), delta(d), g(AD), u(AD);
    auto draw = [&](num::GaussianStream& gs, Vec& p) {
        for (std::size_t i = 0; i < d; ++i) {
            delta[i] = sigma * gs();
            xd[i] = x[i] + delta[i];
        }
        m.logits(xd, logit);
        p = softmax(logit);
        for (std::size_t i = 0; i < d; ++i) {
            xs = xd;
            xs[i] = xd[i] + fd_step;
            m.logits(xs, logit);
            const Vec pp = softmax(logit);
            xs[i] = xd[i] - fd_step;
            m.logits(xs, logit);
            const Vec pm = softmax(logit);
            for (std::size_t a = 0; a < A; ++a) {
                g[a * d + i] = (pp[a] - pm[a]) / (2.0 * fd_step);
                u[a * d + i] = p[a] * delta[i] * inv_s2;
            }
        }
    };

    Vec mass(A, 0.0), mass_sq(A, 0.0), gsum(AD, 0.0), usum(AD, 0.0), p;
    {
        num::GaussianStream gs(seed);
        for (std::size_t k = 0; k < n_mc; ++k) {
            draw(gs, p);
            for (std::size_t a = 0; a < A; ++a) {
                mass[a] += p[a];
                mass_sq[a] += p[a] * p[a];
            }
            for (std::size_t j = 0; j < AD; ++j) {
                gsum[j] += g[j];
                usum[j] += u[j];
            }
        }
    }

    SteinResult r;
    r.actions = A;
    r.dim = d;
    r.pi_smoothed.resize(A);
    r.ess.resize(A);
    r.lhs.resize(AD);
    r.rhs.resize(AD);
    for (std::size_t a = 0; a < A; ++a) {
        r.ess[a] = mass[a] * mass[a] / mass_sq[a];
        if (!(r.ess[a] >= 100.0)) {
            throw std::runtime_error("stein_check: importance weights degenerate (effective sample size " +
                                     std::to_string(r.ess[a]) + " < 100)");
        }
        r.pi_smoothed[a] = mass[a] / n;
        for (std::size_t i = 0; i < d; ++i) {
            r.lhs[a * d + i] = gsum[a * d + i] / mass[a];
            r.rhs[a * d + i] = usum[a * d + i] / mass[a];
        }
    }

    // Second pass over the same draws: ratio-estimator residual variances.
    Vec vl(AD, 0.0), vr(AD, 0.0), vp(AD, 0.0);
    {
        num::GaussianStream gs(seed);
        for (std::size_t k = 0; k < n_mc; ++k) {
            draw(gs, p);
            for (std::size_t a = 0; a < A; ++a) {
                for (std::size_t i = 0; i < d; ++i) {
                    const std::size_t j = a * d + i;
                    const double el = g[j] - r.lhs[j] * p[a];
                    const double er = u[j] - r.rhs[j] * p[a];
                    vl[j] += el * el;
                    vr[j] += er * er;
                    vp[j] += (el - er) * (el - er);
                }
            }
        }
    }
    r.se_lhs.resize(AD);
    r.se_rhs.resize(AD);
    r.se_paired.resize(AD);
    for (std::size_t a = 0; a < A; ++a) {
        const double mean_p = mass[a] / n;
        for (std::size_t i = 0; i < d; ++i) {
            const std::size_t j = a * d + i;
            auto se = [&](double ss) { return std::sqrt(ss / (n - 1.0) / n) / mean_p; };
            r.se_lhs[j] = se(vl[j]);
            r.se_rhs[j] = se(vr[j]);
            r.se_paired[j] = se(vp[j]);
            const double dev = std::abs(r.lhs[j] - r.rhs[j]);
            r.max_abs_dev = std::max(r.max_abs_dev, dev);
            const double comb = std::hypot(r.se_lhs[j], r.se_rhs[j]);
            r.max_dev_combined_se =
                std::max(r.max_dev_combined_se, comb > 0.0 ? dev / comb : (dev > 0.0 ? INFINITY : 0.0));
        }
    }
    return r;
}

// ---------------------------------------------------------------------------------------

Conditions estimate_conditions(const OneLayerModel& m, double sigma, std::size_t n_mc, const std::vector<Vec>& x_grid,
                               std::uint64_t seed)
{
    require(sigma > 0.0 && std::isfinite(sigma), "estimate_conditions: sigma must be positive");
    require(n_mc > 0 && !x_grid.empty(), "estimate_conditions: need draws and at least one x");
    Conditions c{1.0, 0.0};
    for (std::size_t xi = 0; xi < x_grid.size(); ++xi) {
        require(x_grid[xi].size() == m.dim(), "estimate_conditions: x has the wrong dimension");
        const auto s = smoothed_stats(m, x_grid[xi], sigma, n_mc, num::derive_seed(seed, {kDeltaStream, xi}));
        const auto cx = conditions_from(m, x_grid[xi], s, sigma);
        c.alpha = std::min(c.alpha, cx.alpha);
        c.C = std::max(c.C, cx.C);
    }
    return c;
}

// ---------------------------------------------------------------------------------------

double kl_bound(double alpha, double C, std::size_t dim, double zeta_norm, double sigma, int sigma_exponent)
{
    require(alpha > 0.0 && alpha <= 1.0 + 1e-12, "kl_bound: alpha must lie in (0, 1]");
    require(sigma > 0.0, "kl_bound: sigma must be positive");
    require(sigma_exponent == 2 || sigma_exponent == 4, "kl_bound: sigma exponent must be 2 or 4");
    return -std::log(alpha) +
           C * static_cast<double>(dim) * zeta_norm * zeta_norm / (2.0 * std::pow(sigma, sigma_exponent));
}

void KlProbeConfig::validate() const
{
    require(!sigma_grid.empty() && !zeta_grid.empty(), "KlProbeConfig: empty grid");
    for (double s : sigma_grid) require(s > 0.0 && std::isfinite(s), "KlProbeConfig: sigma must be positive");
    for (double z : zeta_grid) require(z >= 0.0 && std::isfinite(z), "KlProbeConfig: zeta_norm must be >= 0");
    require(n_mc >= 2 && n_x >= 1, "KlProbeConfig: need n_mc >= 2 and n_x >= 1");
    require(stderr_multiple >= 0.0, "KlProbeConfig: stderr_multiple must be >= 0");
}

KlProbe kl_bound_check(const OneLayerModel& m, const KlProbeConfig& cfg)
{
    cfg.validate();
    const std::size_t d = m.dim(), A = m.actions();
    const auto xs = gaussian_points(cfg.n_x, d, cfg.seed);
    KlProbe out;
    out.config = cfg;
    out.all_hold_sigma2 = out.all_hold_sigma4 = true;
    Vec xz(d), logit(A);
    for (double sigma : cfg.sigma_grid) {
        std::vector<Vec> pi_s(xs.size());
        Conditions c{1.0, 0.0};
        for (std::size_t xi = 0; xi < xs.size(); ++xi) {
            const auto s = smoothed_stats(m, xs[xi], sigma, cfg.n_mc, num::derive_seed(cfg.seed, {kDeltaStream, xi}));
            const auto cx = conditions_from(m, xs[xi], s, sigma);
            c.alpha = std::min(c.alpha, cx.alpha);
            c.C = std::max(c.C, cx.C);
            pi_s[xi] = s.pi_s;
        }
        if (!(c.alpha > 0.0)) {
            throw std::runtime_error("kl_bound_check: estimated alpha is 0 at sigma " + std::to_string(sigma));
        }
        for (double zn : cfg.zeta_grid) {
            const double scale = zn / std::sqrt(static_cast<double>(d));
            Moments kl;
            for (std::size_t xi = 0; xi < xs.size(); ++xi) {
                num::GaussianStream g(num::derive_seed(cfg.seed, {kZetaStream, xi}));
                for (std::size_t k = 0; k < cfg.n_mc; ++k) {
                    for (std::size_t i = 0; i < d; ++i) {
                        xz[i] = xs[xi][i] + scale * g();
                    }
                    m.logits(xz, logit);
                    kl.add(categorical_kl(pi_s[xi], log_softmax(logit)));
                }
            }
            KlPoint pt;
            pt.sigma = sigma;
            pt.zeta_norm = zn;
            pt.alpha = c.alpha;
            pt.C = c.C;
            pt.kl = kl.mean;
            pt.kl_se = kl.se();
            pt.bound_sigma2 = kl_bound(c.alpha, c.C, d, zn, sigma, 2);
            pt.bound_sigma4 = kl_bound(c.alpha, c.C, d, zn, sigma, 4);
            pt.holds_sigma2 = pt.kl <= pt.bound_sigma2 + cfg.stderr_multiple * pt.kl_se;
            pt.holds_sigma4 = pt.kl <= pt.bound_sigma4 + cfg.stderr_multiple * pt.kl_se;
            out.all_hold_sigma2 = out.all_hold_sigma2 && pt.holds_sigma2;
            out.all_hold_sigma4 = out.all_hold_sigma4 && pt.holds_sigma4;
            out.points.push_back(pt);
        }
    }
    out.supported_exponent = out.all_hold_sigma2 ? (out.all_hold_sigma4 ? "both" : "sigma2")
                                                 : (out.all_hold_sigma4 ? "sigma4" : "neither");
    return out;
}

// ---------------------------------------------------------------------------------------

Vec input_fisher(const OneLayerModel& m, std::span<const double> x)
{
    const std::size_t A = m.actions(), d = m.dim();
    const Vec p = m.probs(x);
    Vec mean_row(d, 0.0);
    for (std::size_t a = 0; a < A; ++a) {
        for (std::size_t i = 0; i < d; ++i) {
            mean_row[i] += p[a] * m.row(a)[i];
        }
    }
    Vec F(d * d, 0.0), ga(d);
    for (std::size_t a = 0; a < A; ++a) {
        for (std::size_t i = 0; i < d; ++i) {
            ga[i] = m.row(a)[i] - mean_row[i];
        }
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                F[i * d + j] += p[a] * ga[i] * ga[j];
            }
        }
    }
    return F;
}

TaylorResult taylor_kl_check(const OneLayerModel& m, const std::vector<Vec>& x_grid, std::span<const double> zeta_grid,
                             std::size_t n_draws, std::uint64_t seed)
{
    require(!x_grid.empty() && n_draws > 0 && !zeta_grid.empty(), "taylor_kl_check: empty input");
    const std::size_t d = m.dim(), A = m.actions();
    TaylorResult r;
    Vec z(d), zeta(d), xz(d), logit(A);
    for (double zn : zeta_grid) {
        require(zn >= 0.0 && std::isfinite(zn), "taylor_kl_check: zeta_norm must be >= 0");
        const double scale = zn / std::sqrt(static_cast<double>(d));
        double exact = 0.0, approx = 0.0;
        for (std::size_t xi = 0; xi < x_grid.size(); ++xi) {
            const auto& x = x_grid[xi];
            require(x.size() == d, "taylor_kl_check: x has the wrong dimension");
            const Vec p = m.probs(x);
            const Vec lp = m.log_probs(x);
            const Vec F = input_fisher(m, x);
            num::GaussianStream g(num::derive_seed(seed, {kZetaStream, xi}));
            for (std::size_t k = 0; k < n_draws; ++k) {
                for (std::size_t i = 0; i < d; ++i) {
                    zeta[i] = scale * g();
                    xz[i] = x[i] + zeta[i];
                }
                m.logits(xz, logit);
                const Vec lq = log_softmax(logit);
                for (std::size_t a = 0; a < A; ++a) {
                    exact += p[a] * (lp[a] - lq[a]);
                }
                double q = 0.0;
                for (std::size_t i = 0; i < d; ++i) {
                    q += zeta[i] * dot(std::span<const double>(F).subspan(i * d, d), zeta);
                }
                approx += 0.5 * q;
            }
        }
        const double n = static_cast<double>(n_draws * x_grid.size());
        TaylorPoint pt{zn, exact / n, approx / n, 0.0};
        pt.gap = pt.exact - pt.approx;
        r.points.push_back(pt);
    }
    // Regression of ln|gap| on ln zeta_norm.
    Vec lx, ly;
    for (const auto& pt : r.points) {
        if (pt.zeta_norm > 0.0 && pt.gap != 0.0) {
            lx.push_back(std::log(pt.zeta_norm));
            ly.push_back(std::log(std::abs(pt.gap)));
        }
    }
    if (lx.size() < 2) {
        r.slope = std::numeric_limits<double>::quiet_NaN();
        return r;
    }
    const double n = static_cast<double>(lx.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        mx += lx[i] / n;
        my += ly[i] / n;
    }
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        sxy += (lx[i] - mx) * (ly[i] - my);
        sxx += (lx[i] - mx) * (lx[i] - mx);
    }
    r.slope = sxx > 0.0 ? sxy / sxx : std::numeric_limits<double>::quiet_NaN();
    return r;
}

// ---------------------------------------------------------------------------------------

Vec SpikeFamily::features(double x) const
{
    const double u = (x - spike_center) / spike_width;
    return {x, 1.0, spike_height * std::exp(-0.5 * u * u)};
}

ScalarInputObjective SpikeFamily::objective() const
{
    require(actions() >= 2, "SpikeFamily: need at least two actions");
    require(spike_width > 0.0, "SpikeFamily: spike width must be positive");
    const SpikeFamily fam = *this;
    const std::size_t A = actions(), F = kFeatures;
    // dJ/dz_b = p_b (A_b - Abar); d2J/dz_b dz_c = delta_bc p_b r_b - p_b p_c (r_b + r_c), r = A - Abar.
    auto local = [fam, A, F](std::span<const double> theta, double x, Vec& f, Vec& p, Vec& r) {
        f = fam.features(x);
        Vec z(A, 0.0);
        for (std::size_t a = 0; a < A; ++a) {
            for (std::size_t i = 0; i < F; ++i) {
                z[a] += theta[a * F + i] * f[i];
            }
        }
        p = softmax(z);
        double abar = 0.0;
        for (std::size_t a = 0; a < A; ++a) {
            abar += p[a] * fam.advantages[a];
        }
        r.resize(A);
        for (std::size_t a = 0; a < A; ++a) {
            r[a] = fam.advantages[a] - abar;
        }
    };
    ScalarInputObjective obj;
    obj.n_params = A * F;
    obj.value = [local, A, fam](std::span<const double> theta, double x) {
        Vec f, p, r;
        local(theta, x, f, p, r);
        double j = 0.0;
        for (std::size_t a = 0; a < A; ++a) {
            j += p[a] * fam.advantages[a];
        }
        return j;
    };
    obj.gradient = [local, A, F](std::span<const double> theta, double x, std::span<double> grad) {
        Vec f, p, r;
        local(theta, x, f, p, r);
        for (std::size_t a = 0; a < A; ++a) {
            for (std::size_t i = 0; i < F; ++i) {
                grad[a * F + i] = p[a] * r[a] * f[i];
            }
        }
    };
    obj.hessian = [local, A, F](std::span<const double> theta, double x, std::span<double> hess) {
        Vec f, p, r;
        local(theta, x, f, p, r);
        const std::size_t n = A * F;
        for (std::size_t b = 0; b < A; ++b) {
            for (std::size_t c = 0; c < A; ++c) {
                const double hz = (b == c ? p[b] * r[b] : 0.0) - p[b] * p[c] * (r[b] + r[c]);
                for (std::size_t i = 0; i < F; ++i) {
                    for (std::size_t j = 0; j < F; ++j) {
                        hess[(b * F + i) * n + c * F + j] = hz * f[i] * f[j];
                    }
                }
            }
        }
    };
    return obj;
}

ScalarInputObjective quadratic_objective(Vec M, std::size_t n)
{
    require(n > 0 && M.size() == n * n, "quadratic_objective: M must be n x n");
    ScalarInputObjective obj;
    obj.n_params = n;
    obj.value = [M, n](std::span<const double> theta, double) {
        double j = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            j += 0.5 * theta[i] * dot(std::span<const double>(M).subspan(i * n, n), theta);
        }
        return j;
    };
    obj.gradient = [M, n](std::span<const double> theta, double, std::span<double> grad) {
        for (std::size_t i = 0; i < n; ++i) {
            grad[i] = 0.5 * (dot(std::span<const double>(M).subspan(i * n, n), theta));
            for (std::size_t j = 0; j < n; ++j) {
                grad[i] += 0.5 * M[j * n + i] * theta[j];
            }
        }
    };
    obj.hessian = [M, n](std::span<const double>, double, std::span<double> hess) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                hess[i * n + j] = 0.5 * (M[i * n + j] + M[j * n + i]);
            }
        }
    };
    return obj;
}

void SmoothnessConfig::validate() const
{
    require(!x_grid.empty(), "SmoothnessConfig: empty x grid");
    require(!sigma_grid.empty(), "SmoothnessConfig: empty sigma grid");
    for (double s : sigma_grid) require(s > 0.0 && std::isfinite(s), "SmoothnessConfig: sigma must be positive");
    require(stderr_batches >= 2 && n_mc >= stderr_batches && n_mc % stderr_batches == 0,
            "SmoothnessConfig: n_mc must be a positive multiple of stderr_batches >= 2");
    require(hvp_step > 0.0 && power_tol > 0.0, "SmoothnessConfig: hvp_step and power_tol must be positive");
}

namespace {

num::Tensor smoothed_gradient(const ScalarInputObjective& obj, std::span<const double> theta, double x, double sigma,
                              std::span<const double> z)
{
    num::Tensor g(num::Shape{obj.n_params});
    Vec tmp(obj.n_params);
    if (sigma == 0.0) {
        obj.gradient(theta, x, g.data());
        return g;
    }
    auto acc = g.data();
    for (double zk : z) {
        obj.gradient(theta, x + sigma * zk, tmp);
        for (std::size_t i = 0; i < tmp.size(); ++i) {
            acc[i] += tmp[i];
        }
    }
    for (double& v : acc) {
        v /= static_cast<double>(z.size());
    }
    return g;
}

double spectral_norm_from(const ScalarInputObjective& obj, std::span<const double> theta, double x, double sigma,
                          std::span<const double> z, double h, double tol, num::Tensor& start)
{
    const num::Tensor th(num::Shape{obj.n_params}, Vec(theta.begin(), theta.end()));
    const num::GradientFn grad = [&](const num::Tensor& t) { return smoothed_gradient(obj, t.data(), x, sigma, z); };
    const auto res =
        num::power_iteration([&](const num::Tensor& v) { return num::hvp(grad, th, v, h); }, start, tol, 200);
    if (res.spectral_norm > 0.0) {
        start = res.vector;
    }
    return res.spectral_norm;
}

num::Tensor default_start(std::size_t n)
{
    num::Tensor s(num::Shape{n});
    for (std::size_t i = 0; i < n; ++i) {
        s[i] = 1.0 + 0.1 * static_cast<double>(i % 7);
    }
    return s;
}

} // namespace

double hessian_spectral_norm(const ScalarInputObjective& obj, std::span<const double> theta, double x, double sigma,
                             std::span<const double> z, double hvp_step, double power_tol)
{
    require(theta.size() == obj.n_params, "hessian_spectral_norm: theta has the wrong size");
    require(sigma == 0.0 || !z.empty(), "hessian_spectral_norm: smoothing needs draws");
    num::Tensor start = default_start(obj.n_params);
    return spectral_norm_from(obj, theta, x, sigma, z, hvp_step, power_tol, start);
}

Vec smoothed_hessian(const ScalarInputObjective& obj, std::span<const double> theta, double x, double sigma,
                     std::span<const double> z)
{
    require(static_cast<bool>(obj.hessian), "smoothed_hessian: objective has no dense Hessian");
    const std::size_t n = obj.n_params;
    Vec H(n * n, 0.0), tmp(n * n);
    if (sigma == 0.0) {
        obj.hessian(theta, x, H);
        return H;
    }
    for (double zk : z) {
        obj.hessian(theta, x + sigma * zk, tmp);
        for (std::size_t i = 0; i < H.size(); ++i) {
            H[i] += tmp[i];
        }
    }
    for (double& v : H) {
        v /= static_cast<double>(z.size());
    }
    return H;
}

SmoothnessResult smoothness_check(const ScalarInputObjective& obj, std::span<const double> theta,
                                  const SmoothnessConfig& cfg)
{
    cfg.validate();
    require(theta.size() == obj.n_params, "smoothness_check: theta has the wrong size");
    Vec z(cfg.n_mc);
    {
        num::GaussianStream g(num::derive_seed(cfg.seed, {kDeltaStream}));
        for (double& v : z) {
            v = g();
        }
    }
    auto sweep = [&](double sigma, double& best_x) {
        num::Tensor start = default_start(obj.n_params);
        double best = -1.0;
        for (double x : cfg.x_grid) {
            const double s = spectral_norm_from(obj, theta, x, sigma, z, cfg.hvp_step, cfg.power_tol, start);
            if (s > best) {
                best = s;
                best_x = x;
            }
        }
        return best;
    };
    SmoothnessResult r;
    r.raw_sup_norm = sweep(0.0, r.raw_argmax_x);
    r.min_contracting_sigma = std::numeric_limits<double>::quiet_NaN();
    const std::size_t per = cfg.n_mc / cfg.stderr_batches;
    for (double sigma : cfg.sigma_grid) {
        SmoothnessLevel lv;
        lv.sigma = sigma;
        lv.sup_norm = sweep(sigma, lv.argmax_x);
        Moments batches;
        for (std::size_t b = 0; b < cfg.stderr_batches; ++b) {
            num::Tensor start = default_start(obj.n_params);
            batches.add(spectral_norm_from(obj, theta, lv.argmax_x, sigma, std::span<const double>(z).subspan(b * per, per),
                                           cfg.hvp_step, cfg.power_tol, start));
        }
        // Batch means: the full-sample estimate has 1/B of one batch's variance.
        lv.sup_norm_se = batches.se();
        lv.contraction = r.raw_sup_norm > 0.0 ? lv.sup_norm / r.raw_sup_norm : 1.0;
        if (lv.contraction < 1.0 && std::isnan(r.min_contracting_sigma)) {
            r.min_contracting_sigma = sigma;
        }
        r.levels.push_back(lv);
    }
    return r;
}

// ---------------------------------------------------------------------------------------

double bumps_value(std::span<const Bump> bumps, double x)
{
    double s = 0.0;
    for (const auto& b : bumps) {
        const double u = (x - b.center) / b.width;
        s += b.height * std::exp(-0.5 * u * u);
    }
    return s;
}

void LandscapeConfig::validate() const
{
    require(!bumps.empty(), "LandscapeConfig: no bumps");
    for (const auto& b : bumps) require(b.width > 0.0, "LandscapeConfig: bump width must be positive");
    require(x_hi > x_lo && x_points >= 2, "LandscapeConfig: bad x grid");
    require(quad_nodes >= 3 && quad_nodes % 2 == 1, "LandscapeConfig: quad_nodes must be odd and >= 3");
    require(quad_span > 0.0, "LandscapeConfig: quad_span must be positive");
}

Vec LandscapeConfig::x_grid() const
{
    Vec x(x_points);
    const double step = (x_hi - x_lo) / static_cast<double>(x_points - 1);
    for (std::size_t i = 0; i < x_points; ++i) {
        x[i] = x_lo + step * static_cast<double>(i);
    }
    return x;
}

Vec smoothed_curve(const LandscapeConfig& cfg, double sigma)
{
    cfg.validate();
    require(sigma >= 0.0 && std::isfinite(sigma), "smoothed_curve: sigma must be >= 0");
    const Vec x = cfg.x_grid();
    Vec out(x.size());
    if (sigma == 0.0) {
        for (std::size_t i = 0; i < x.size(); ++i) {
            out[i] = bumps_value(cfg.bumps, x[i]);
        }
        return out;
    }
    // Trapezoid nodes in standard units, weights normalized so constants are preserved exactly.
    const std::size_t n = cfg.quad_nodes;
    Vec t(n), w(n);
    double wsum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        t[j] = -cfg.quad_span + 2.0 * cfg.quad_span * static_cast<double>(j) / static_cast<double>(n - 1);
        w[j] = std::exp(-0.5 * t[j] * t[j]) * ((j == 0 || j == n - 1) ? 0.5 : 1.0);
        wsum += w[j];
    }
    for (double& v : w) {
        v /= wsum;
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            s += w[j] * bumps_value(cfg.bumps, x[i] - sigma * t[j]);
        }
        out[i] = s;
    }
    return out;
}

namespace {

std::size_t nearest_bump(std::span<const Bump> bumps, double x)
{
    std::size_t best = 0;
    for (std::size_t b = 1; b < bumps.size(); ++b) {
        if (std::abs(bumps[b].center - x) < std::abs(bumps[best].center - x)) {
            best = b;
        }
    }
    return best;
}

double curve_argmax(const Vec& x, const Vec& y)
{
    return x[static_cast<std::size_t>(std::max_element(y.begin(), y.end()) - y.begin())];
}

} // namespace

std::size_t argmax_bump(const LandscapeConfig& cfg, double sigma)
{
    return nearest_bump(cfg.bumps, curve_argmax(cfg.x_grid(), smoothed_curve(cfg, sigma)));
}

double switch_sigma(const LandscapeConfig& cfg, double lo, double hi, double tol)
{
    require(0.0 <= lo && lo < hi && tol > 0.0, "switch_sigma: need 0 <= lo < hi and tol > 0");
    const std::size_t b_lo = argmax_bump(cfg, lo);
    if (argmax_bump(cfg, hi) == b_lo) {
        throw std::invalid_argument("switch_sigma: argmax does not change over the bracket");
    }
    while (hi - lo > tol) {
        const double mid = 0.5 * (lo + hi);
        (argmax_bump(cfg, mid) == b_lo ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

LandscapeResult landscape_toy(const LandscapeConfig& cfg, std::span<const double> sigma_grid, double bracket_lo,
                              double bracket_hi)
{
    cfg.validate();
    LandscapeResult r;
    r.x = cfg.x_grid();
    r.f = smoothed_curve(cfg, 0.0);
    for (double s : sigma_grid) {
        r.sigmas.push_back(s);
        r.curves.push_back(smoothed_curve(cfg, s));
        r.argmax_x.push_back(curve_argmax(r.x, r.curves.back()));
    }
    r.sigma_star = switch_sigma(cfg, bracket_lo, bracket_hi);
    return r;
}

// ---------------------------------------------------------------------------------------

nlohmann::json to_json(const SteinResult& r)
{
    return {{"actions", r.actions},         {"dim", r.dim},           {"pi_smoothed", r.pi_smoothed},
            {"lhs", r.lhs},                 {"rhs", r.rhs},           {"se_lhs", r.se_lhs},
            {"se_rhs", r.se_rhs},           {"se_paired", r.se_paired}, {"ess", r.ess},
            {"max_abs_dev", r.max_abs_dev}, {"max_dev_combined_se", r.max_dev_combined_se}};
}

nlohmann::json to_json(const KlProbe& r)
{
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : r.points) {
        pts.push_back({{"sigma", p.sigma},
                       {"zeta_norm", p.zeta_norm},
                       {"alpha", p.alpha},
                       {"C", p.C},
                       {"kl", p.kl},
                       {"kl_se", p.kl_se},
                       {"bound_sigma2", p.bound_sigma2},
                       {"bound_sigma4", p.bound_sigma4},
                       {"holds_sigma2", p.holds_sigma2},
                       {"holds_sigma4", p.holds_sigma4}});
    }
    return {{"sigma_grid", r.config.sigma_grid},
            {"zeta_grid", r.config.zeta_grid},
            {"n_mc", r.config.n_mc},
            {"n_x", r.config.n_x},
            {"seed", r.config.seed},
            {"stderr_multiple", r.config.stderr_multiple},
            {"points", pts},
            {"all_hold_sigma2", r.all_hold_sigma2},
            {"all_hold_sigma4", r.all_hold_sigma4},
            {"supported_exponent", r.supported_exponent}};
}

nlohmann::json to_json(const TaylorResult& r)
{
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : r.points) {
        pts.push_back({{"zeta_norm", p.zeta_norm}, {"exact", p.exact}, {"approx", p.approx}, {"gap", p.gap}});
    }
    return {{"points", pts}, {"slope", std::isfinite(r.slope) ? nlohmann::json(r.slope) : nlohmann::json(nullptr)}};
}

nlohmann::json to_json(const SmoothnessResult& r)
{
    nlohmann::json lv = nlohmann::json::array();
    for (const auto& l : r.levels) {
        lv.push_back({{"sigma", l.sigma},
                      {"sup_norm", l.sup_norm},
                      {"argmax_x", l.argmax_x},
                      {"sup_norm_se", l.sup_norm_se},
                      {"contraction", l.contraction}});
    }
    return {{"raw_sup_norm", r.raw_sup_norm},
            {"raw_argmax_x", r.raw_argmax_x},
            {"levels", lv},
            {"min_contracting_sigma", std::isfinite(r.min_contracting_sigma) ? nlohmann::json(r.min_contracting_sigma)
                                                                               : nlohmann::json(nullptr)}};
}

nlohmann::json to_json(const LandscapeResult& r)
{
    return {{"sigmas", r.sigmas}, {"argmax_x", r.argmax_x}, {"sigma_star", r.sigma_star}};
}

void write_landscape_csv(const LandscapeResult& r, std::ostream& out)
{
    out << "x,f";
    for (double s : r.sigmas) {
        out << ",sigma_" << s;
    }
    out << '\n';
    out.precision(17);
    for (std::size_t i = 0; i < r.x.size(); ++i) {
        out << r.x[i] << ',' << r.f[i];
        for (const auto& c : r.curves) {
            out << ',' << c[i];
        }
        out << '\n';
    }
}

} // namespace alp::theorylab
