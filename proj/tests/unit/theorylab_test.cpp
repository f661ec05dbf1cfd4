#include "alp/numcore/rng.hpp"
#include "alp/theorylab/theorylab.hpp"

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

using namespace alp::theorylab;

namespace {

double dense_spectral_norm(const Vec& H, std::size_t n)
{
    Eigen::MatrixXd M(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            M(i, j) = 0.5 * (H[i * n + j] + H[j * n + i]);
        }
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
    return es.eigenvalues().cwiseAbs().maxCoeff();
}

Vec normals(std::size_t n, std::uint64_t seed)
{
    alp::num::GaussianStream g(seed);
    Vec z(n);
    for (double& v : z) v = g();
    return z;
}

Vec x_line(double lo, double step, int count)
{
    Vec x;
    for (int i = 0; i < count; ++i) x.push_back(lo + step * i);
    return x;
}

} // namespace

// ---------------------------------------------------------------------------------------

TEST(OneLayerModel, SoftmaxNormalizes)
{
    for (std::uint64_t s = 0; s < 50; ++s) {
        const auto m = OneLayerModel::random(16, 8, s, 3.0);
        const auto x = gaussian_points(1, 8, s)[0];
        const Vec p = m.probs(x);
        EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
        const Vec lp = m.log_probs(x);
        for (std::size_t a = 0; a < p.size(); ++a) EXPECT_NEAR(std::exp(lp[a]), p[a], 1e-14);
    }
}

TEST(OneLayerModel, RejectsBadWeights)
{
    EXPECT_THROW(OneLayerModel(3, 2, Vec(5, 0.0)), std::invalid_argument);
    EXPECT_THROW(OneLayerModel(1, 2, Vec(2, 0.0)), std::invalid_argument);
    EXPECT_THROW(OneLayerModel(2, 1, Vec{0.0, NAN}), std::invalid_argument);
}

// ---------------------------------------------------------------------------------------

TEST(Stein, ConstantPolicyGivesZeroGradient)
{
    const OneLayerModel m(3, 2, Vec(6, 0.0));
    const auto r = stein_check(m, Vec{0.4, -1.0}, 0.5, 20000, 3);
    for (std::size_t j = 0; j < r.lhs.size(); ++j) {
        EXPECT_EQ(r.lhs[j], 0.0);
        EXPECT_LT(std::abs(r.rhs[j]), 5.0 * r.se_rhs[j]);
    }
}

TEST(Stein, SymmetricTwoActionModelAtOrigin)
{
    const OneLayerModel m(2, 2, Vec{0.8, -0.3, -0.8, 0.3});
    const auto r = stein_check(m, Vec{0.0, 0.0}, 0.5, 100000, 7);
    for (std::size_t i = 0; i < 2; ++i) {
        // Weighted by pi_s the action gradients sum to the gradient of 1.
        EXPECT_NEAR(r.pi_smoothed[0] * r.lhs[i] + r.pi_smoothed[1] * r.lhs[2 + i], 0.0, 1e-12);
        EXPECT_NEAR(r.lhs[i], -r.lhs[2 + i], 5.0 * std::hypot(r.se_lhs[i], r.se_lhs[2 + i]));
        EXPECT_NEAR(r.rhs[i], -r.rhs[2 + i], 5.0 * std::hypot(r.se_rhs[i], r.se_rhs[2 + i]));
    }
}

TEST(Stein, RandomModelSidesAgree)
{
    const auto m = OneLayerModel::random(3, 2, 11);
    const auto r = stein_check(m, Vec{0.3, -0.2}, 0.5, 1'000'000, 5);
    EXPECT_LT(r.max_dev_combined_se, 5.0);
    EXPECT_GT(r.max_abs_dev, 0.0);
}

TEST(Stein, StandardErrorShrinksAtRootNRate)
{
    const auto m = OneLayerModel::random(3, 2, 12);
    const Vec x{-0.5, 0.25};
    std::vector<double> lx, ly;
    for (std::size_t n : {10'000u, 100'000u, 1'000'000u}) {
        const auto r = stein_check(m, x, 0.3, n, 9);
        EXPECT_LT(r.max_dev_combined_se, 5.0);
        lx.push_back(std::log(static_cast<double>(n)));
        ly.push_back(std::log(*std::max_element(r.se_paired.begin(), r.se_paired.end())));
    }
    const double slope = (ly[2] - ly[0]) / (lx[2] - lx[0]);
    EXPECT_NEAR(slope, -0.5, 0.05);
}

TEST(Stein, DegenerateWeightsThrow)
{
    const OneLayerModel m(2, 1, Vec{200.0, -200.0});
    EXPECT_THROW(stein_check(m, Vec{-0.035}, 0.01, 10000, 1), std::runtime_error);
}

TEST(Stein, RejectsBadArguments)
{
    const auto m = OneLayerModel::random(3, 2, 1);
    EXPECT_THROW(stein_check(m, Vec{0.0, 0.0}, 0.0, 20000, 1), std::invalid_argument);
    EXPECT_THROW(stein_check(m, Vec{0.0, 0.0}, 0.5, 100, 1), std::invalid_argument);
    EXPECT_THROW(stein_check(m, Vec{0.0}, 0.5, 20000, 1), std::invalid_argument);
}

// ---------------------------------------------------------------------------------------

TEST(Conditions, NearIdentityAtTinySigma)
{
    const auto m = OneLayerModel::random(8, 4, 2);
    const auto c = estimate_conditions(m, 1e-4, 20000, gaussian_points(4, 4, 2), 3);
    EXPECT_GE(c.alpha, 1.0 - 1e-3);
    EXPECT_LE(c.alpha, 1.0);
}

TEST(Conditions, ConstantPolicy)
{
    const OneLayerModel m(4, 3, Vec(12, 0.0));
    const std::size_t n = 50000;
    const auto c = estimate_conditions(m, 0.3, n, gaussian_points(3, 3, 1), 4);
    EXPECT_NEAR(c.alpha, 1.0, 1e-12);
    // Posterior equals prior; what remains is the squared sample mean, about 1/n.
    EXPECT_LT(c.C, 20.0 / static_cast<double>(n));
}

TEST(Conditions, SplitHalfStability)
{
    const auto m = OneLayerModel::random(8, 4, 3);
    const auto xs = gaussian_points(4, 4, 3);
    const auto a = estimate_conditions(m, 0.3, 200000, xs, 100);
    const auto b = estimate_conditions(m, 0.3, 200000, xs, 200);
    EXPECT_NEAR(a.C / b.C, 1.0, 0.1);
    EXPECT_NEAR(a.alpha / b.alpha, 1.0, 0.1);
}

TEST(Conditions, UnderflowThrows)
{
    const OneLayerModel m(2, 1, Vec{800.0, -800.0});
    EXPECT_THROW(estimate_conditions(m, 1e-3, 1000, {Vec{1.0}}, 1), std::runtime_error);
}

// ---------------------------------------------------------------------------------------

TEST(KlBound, FormulaScaling)
{
    const double base = kl_bound(0.5, 2.0, 4, 0.1, 0.2, 2);
    const double doubled = kl_bound(0.5, 2.0, 4, 0.1, 0.4, 2);
    const double floor = -std::log(0.5);
    EXPECT_NEAR((doubled - floor) / (base - floor), 0.25, 1e-14);
    EXPECT_NEAR(base - floor, 2.0 * 4 * 0.01 / (2 * 0.04), 1e-14);
    const double b4 = kl_bound(0.5, 2.0, 4, 0.1, 0.2, 4);
    const double b4d = kl_bound(0.5, 2.0, 4, 0.1, 0.4, 4);
    EXPECT_NEAR((b4d - floor) / (b4 - floor), 1.0 / 16.0, 1e-14);
    EXPECT_THROW(kl_bound(0.0, 1.0, 4, 0.1, 0.2, 2), std::invalid_argument);
    EXPECT_THROW(kl_bound(0.5, 1.0, 4, 0.1, 0.2, 3), std::invalid_argument);
}

TEST(KlBound, NearIdentityHolds)
{
    const auto m = OneLayerModel::random(8, 4, 21);
    KlProbeConfig cfg;
    cfg.sigma_grid = {1e-4};
    cfg.zeta_grid = {0.0};
    cfg.n_mc = 20000;
    cfg.n_x = 4;
    const auto r = kl_bound_check(m, cfg);
    ASSERT_EQ(r.points.size(), 1u);
    EXPECT_LE(r.points[0].kl, 1e-4);
    EXPECT_GE(r.points[0].kl, 0.0);
    EXPECT_GE(r.points[0].bound_sigma2, 0.0);
    EXPECT_TRUE(r.points[0].holds_sigma2);
}

TEST(KlBound, ReducedGridHoldsForBothExponents)
{
    const auto m = OneLayerModel::random(8, 4, 21);
    KlProbeConfig cfg;
    cfg.n_mc = 50000;
    cfg.n_x = 4;
    const auto r = kl_bound_check(m, cfg);
    ASSERT_EQ(r.points.size(), 6u);
    for (const auto& p : r.points) {
        EXPECT_GT(p.alpha, 0.0);
        EXPECT_LE(p.alpha, 1.0);
        EXPECT_GE(p.kl, 0.0);
        EXPECT_GE(p.bound_sigma4, p.bound_sigma2);   // sigma < 1
    }
    EXPECT_TRUE(r.all_hold_sigma2);
    EXPECT_EQ(r.supported_exponent, "both");
}

TEST(KlBoundProperty, ZeroMismatchKlBelowLogAlpha)
{
    // KL(pi_s || pi) <= max ln(pi_s / pi) = -ln alpha when alpha is computed on the same draws.
    for (std::uint64_t s = 0; s < 8; ++s) {
        const auto m = OneLayerModel::random(6, 3, 40 + s, 1.5);
        KlProbeConfig cfg;
        cfg.sigma_grid = {0.05 + 0.1 * static_cast<double>(s)};
        cfg.zeta_grid = {0.0};
        cfg.n_mc = 5000;
        cfg.n_x = 3;
        cfg.seed = s;
        const auto p = kl_bound_check(m, cfg).points[0];
        EXPECT_LE(p.kl, -std::log(p.alpha) + 1e-12) << "seed " << s;
    }
}

TEST(KlBound, RejectsBadConfig)
{
    const auto m = OneLayerModel::random(8, 4, 21);
    KlProbeConfig cfg;
    cfg.sigma_grid = {0.0};
    EXPECT_THROW(kl_bound_check(m, cfg), std::invalid_argument);
    cfg = KlProbeConfig{};
    cfg.zeta_grid = {-1.0};
    EXPECT_THROW(kl_bound_check(m, cfg), std::invalid_argument);
}

// ---------------------------------------------------------------------------------------

TEST(Taylor, FisherMatchesKlCurvature)
{
    // The input Fisher is the Hessian of zeta -> KL(pi(.|x) || pi(.|x + zeta)) at zeta = 0.
    const auto m = OneLayerModel::random(5, 3, 8);
    const Vec x{0.2, -0.7, 1.1};
    const Vec F = input_fisher(m, x);
    const Vec p = m.probs(x);
    auto kl = [&](const Vec& zeta) {
        Vec xz(3);
        for (int i = 0; i < 3; ++i) xz[i] = x[i] + zeta[i];
        const Vec lq = m.log_probs(xz);
        double s = 0.0;
        for (std::size_t a = 0; a < p.size(); ++a) s += p[a] * (std::log(p[a]) - lq[a]);
        return s;
    };
    const double h = 1e-4;
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            Vec pp(3, 0.0), pm(3, 0.0), mp(3, 0.0), mm(3, 0.0);
            pp[i] += h; pp[j] += h;
            pm[i] += h; pm[j] -= h;
            mp[i] -= h; mp[j] += h;
            mm[i] -= h; mm[j] -= h;
            const double fd = (kl(pp) - kl(pm) - kl(mp) + kl(mm)) / (4 * h * h);
            EXPECT_NEAR(F[i * 3 + j], fd, 1e-6);
        }
    }
}

TEST(Taylor, ZeroZetaGivesZero)
{
    const auto m = OneLayerModel::random(8, 4, 21);
    const std::vector<double> grid{0.0};
    const auto r = taylor_kl_check(m, gaussian_points(3, 4, 1), grid, 100, 1);
    EXPECT_EQ(r.points[0].exact, 0.0);
    EXPECT_EQ(r.points[0].approx, 0.0);
    EXPECT_TRUE(std::isnan(r.slope));
}

TEST(Taylor, ApproximationScalesQuadratically)
{
    const auto m = OneLayerModel::random(8, 4, 21);
    const std::vector<double> grid{0.1, 0.05};
    const auto r = taylor_kl_check(m, gaussian_points(4, 4, 2), grid, 2000, 3);
    EXPECT_NEAR(r.points[1].approx / r.points[0].approx, 0.25, 0.25 * 0.05);
}

TEST(Taylor, RemainderIsThirdOrder)
{
    const auto m = OneLayerModel::random(8, 4, 21);
    const std::vector<double> grid{0.2, 0.1, 0.05};
    const auto r = taylor_kl_check(m, gaussian_points(8, 4, 3), grid, 20000, 4);
    EXPECT_GE(r.slope, 2.5);
    for (const auto& p : r.points) EXPECT_LT(std::abs(p.gap), 0.05 * p.exact);
}

// ---------------------------------------------------------------------------------------

TEST(Smoothness, SpikeGradientAndHessianMatchFiniteDifferences)
{
    const SpikeFamily fam;
    const auto obj = fam.objective();
    const auto model = OneLayerModel::random(4, 3, 7, 0.3);
    const auto theta = model.weights();
    const std::size_t n = obj.n_params;
    const double h = 1e-5;
    for (double x : {-0.8, 0.28, 0.3, 1.2}) {
        Vec g(n), H(n * n), gp(n), gm(n);
        obj.gradient(theta, x, g);
        obj.hessian(theta, x, H);
        for (std::size_t i = 0; i < n; ++i) {
            Vec tp(theta.begin(), theta.end()), tm = tp;
            tp[i] += h;
            tm[i] -= h;
            EXPECT_NEAR(g[i], (obj.value(tp, x) - obj.value(tm, x)) / (2 * h), 1e-8);
            obj.gradient(tp, x, gp);
            obj.gradient(tm, x, gm);
            for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(H[j * n + i], (gp[j] - gm[j]) / (2 * h), 1e-7);
        }
    }
}

TEST(Smoothness, PowerIterationMatchesDenseEigensolver)
{
    const SpikeFamily fam;
    const auto obj = fam.objective();
    ASSERT_LE(obj.n_params, 20u);
    const auto model = OneLayerModel::random(4, 3, 7, 0.3);
    const auto theta = model.weights();
    const Vec z = normals(500, 3);
    for (double sigma : {0.0, 0.05, 0.2}) {
        for (double x : {-0.6, 0.3, 0.9}) {
            const double pi = hessian_spectral_norm(obj, theta, x, sigma, z, 1e-5, 1e-12);
            const double dense = dense_spectral_norm(smoothed_hessian(obj, theta, x, sigma, z), obj.n_params);
            EXPECT_NEAR(pi / dense, 1.0, 1e-6) << "sigma " << sigma << " x " << x;
        }
    }
}

TEST(Smoothness, SpikeSmoothedAtFourWidthsHasLowerSupNorm)
{
    // Dense-eigensolver oracle over the grid, independent of power iteration.
    const SpikeFamily fam;
    const auto obj = fam.objective();
    const auto model = OneLayerModel::random(4, 3, 7, 0.3);
    const auto theta = model.weights();
    const Vec z = normals(1000, 5);
    const Vec xs = x_line(-1.0, 0.05, 51);
    double raw = 0.0, smooth = 0.0;
    for (double x : xs) {
        raw = std::max(raw, dense_spectral_norm(smoothed_hessian(obj, theta, x, 0.0, z), obj.n_params));
        smooth = std::max(smooth, dense_spectral_norm(smoothed_hessian(obj, theta, x, 4 * fam.spike_width, z),
                                                      obj.n_params));
    }
    EXPECT_LT(smooth, raw);
}

TEST(Smoothness, ConstantCurvatureDoesNotContract)
{
    const std::size_t n = 5;
    Vec M(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) M[i * n + i] = 1.0 + static_cast<double>(i);
    M[1] = M[n] = 0.5;
    const auto obj = quadratic_objective(M, n);
    SmoothnessConfig cfg;
    cfg.x_grid = x_line(-1.0, 0.5, 5);
    cfg.n_mc = 200;
    const Vec theta(n, 0.1);
    const auto r = smoothness_check(obj, theta, cfg);
    for (const auto& lv : r.levels) EXPECT_NEAR(lv.contraction, 1.0, 1e-6);
    EXPECT_TRUE(std::isnan(r.min_contracting_sigma));
}

TEST(Smoothness, SpikeSweepContractsMonotonically)
{
    const SpikeFamily fam;
    const auto obj = fam.objective();
    const auto model = OneLayerModel::random(4, 3, 7, 0.3);
    const auto theta = model.weights();
    SmoothnessConfig cfg;
    cfg.x_grid = x_line(-1.0, 0.05, 51);
    const auto r = smoothness_check(obj, theta, cfg);
    EXPECT_NEAR(r.raw_argmax_x, fam.spike_center, 1e-9);
    ASSERT_EQ(r.levels.size(), 3u);
    EXPECT_LE(r.levels.back().contraction, 0.8);
    double prev = r.raw_sup_norm, prev_se = 0.0;
    for (const auto& lv : r.levels) {
        EXPECT_LE(lv.contraction, 1.0 + 2.0 * lv.sup_norm_se / r.raw_sup_norm);
        EXPECT_LE(lv.sup_norm, prev + 2.0 * std::hypot(lv.sup_norm_se, prev_se));
        prev = lv.sup_norm;
        prev_se = lv.sup_norm_se;
    }
    EXPECT_EQ(r.min_contracting_sigma, cfg.sigma_grid[0]);
}

TEST(Smoothness, RejectsBadConfig)
{
    const auto obj = SpikeFamily{}.objective();
    const Vec theta(obj.n_params, 0.0);
    SmoothnessConfig cfg;
    EXPECT_THROW(smoothness_check(obj, theta, cfg), std::invalid_argument);
    cfg.x_grid = {0.0};
    cfg.n_mc = 15;
    EXPECT_THROW(smoothness_check(obj, theta, cfg), std::invalid_argument);
}

// ---------------------------------------------------------------------------------------

TEST(Landscape, ZeroSigmaIsIdentity)
{
    const LandscapeConfig cfg;
    const Vec f = smoothed_curve(cfg, 0.0);
    const Vec x = cfg.x_grid();
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(f[i], bumps_value(cfg.bumps, x[i]));
}

TEST(Landscape, QuadratureMatchesClosedFormConvolution)
{
    // N(0, w^2) * N(0, s^2) = N(0, w^2 + s^2), so each bump maps to a wider, lower bump.
    const LandscapeConfig cfg;
    const Vec x = cfg.x_grid();
    for (double s : {0.01, 0.05, 0.3}) {
        const Vec y = smoothed_curve(cfg, s);
        for (std::size_t i = 0; i < x.size(); i += 37) {
            double exact = 0.0;
            for (const auto& b : cfg.bumps) {
                const double v = b.width * b.width + s * s;
                exact += b.height * b.width / std::sqrt(v) * std::exp(-(x[i] - b.center) * (x[i] - b.center) / (2 * v));
            }
            EXPECT_NEAR(y[i], exact, 1e-9) << "sigma " << s << " x " << x[i];
        }
    }
}

TEST(Landscape, SymmetryPreserved)
{
    LandscapeConfig cfg;
    cfg.bumps = {{0.7, 0.1, 1.0}, {-0.7, 0.1, 1.0}, {0.0, 0.4, 0.3}};
    const Vec y = smoothed_curve(cfg, 0.2);
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], y[y.size() - 1 - i], 1e-12);
}

TEST(Landscape, ArgmaxSwitchesAtStableSigma)
{
    LandscapeConfig cfg;
    EXPECT_EQ(argmax_bump(cfg, 0.005), 0u);
    EXPECT_EQ(argmax_bump(cfg, 0.05), 1u);
    std::vector<double> stars;
    for (std::size_t nodes : {401u, 801u, 1601u}) {
        cfg.quad_nodes = nodes;
        stars.push_back(switch_sigma(cfg, 0.001, 0.1));
    }
    for (double s : stars) {
        EXPECT_NEAR(s, stars.back(), 1e-3);
        // Bisection on the closed-form smoothed curve over the same x grid.
        EXPECT_NEAR(s, 0.0150328951, 1e-6);
    }
}

TEST(Landscape, ToyReportsTrajectory)
{
    const LandscapeConfig cfg;
    const std::vector<double> sigmas{0.0, 0.01, 0.02, 0.1};
    const auto r = landscape_toy(cfg, sigmas, 0.001, 0.1);
    ASSERT_EQ(r.curves.size(), 4u);
    EXPECT_NEAR(r.argmax_x[0], 1.0, 1e-9);
    EXPECT_NEAR(r.argmax_x[1], 1.0, 1e-9);
    EXPECT_NEAR(r.argmax_x[2], -1.0, 1e-9);
    EXPECT_NEAR(r.argmax_x[3], -1.0, 1e-9);
    std::ostringstream os;
    write_landscape_csv(r, os);
    const std::string csv = os.str();
    EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), r.x.size() + 1);
    EXPECT_THROW(switch_sigma(cfg, 0.05, 0.1), std::invalid_argument);
}
