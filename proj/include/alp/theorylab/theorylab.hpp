#pragma once

// Numerical probes of the input-perturbation theory on one-layer softmax policies.
//
// Notation: pi(a|x) = softmax(W x)_a, delta ~ N(0, sigma^2 I), and the smoothed policy
// pi_s(a|x) = E_delta pi(a|x + delta). Expectations over actions are exact sums; only the
// delta and zeta expectations are Monte-Carlo. Every probe is deterministic in its seed.

#include <nlohmann/json.hpp>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace alp::theorylab {

using Vec = std::vector<double>;

/// Softmax of a logit vector; sums to 1 within 1e-12.
Vec softmax(std::span<const double> logits);
Vec log_softmax(std::span<const double> logits);

class OneLayerModel {
public:
    /// W is row-major, actions x dim. Throws std::invalid_argument on size mismatch or
    /// non-finite entries.
    OneLayerModel(std::size_t actions, std::size_t dim, Vec W);

    /// Entries drawn N(0, scale^2).
    static OneLayerModel random(std::size_t actions, std::size_t dim, std::uint64_t seed, double scale = 1.0);

    std::size_t actions() const noexcept { return actions_; }
    std::size_t dim() const noexcept { return dim_; }
    std::span<const double> weights() const noexcept { return W_; }
    std::span<const double> row(std::size_t a) const { return std::span(W_).subspan(a * dim_, dim_); }

    void logits(std::span<const double> x, std::span<double> out) const;
    Vec probs(std::span<const double> x) const;
    Vec log_probs(std::span<const double> x) const;

private:
    std::size_t actions_;
    std::size_t dim_;
    Vec W_;
};

/// Points drawn N(0, I_dim).
std::vector<Vec> gaussian_points(std::size_t count, std::size_t dim, std::uint64_t seed);

// ---------------------------------------------------------------------------------------
// Stein identity: grad_x ln pi_s(a|x) = E_q[delta] / sigma^2, q(delta) ~ pi(a|x+delta) phi(delta).

struct SteinResult {
    std::size_t actions = 0;
    std::size_t dim = 0;
    Vec pi_smoothed;   // [a]
    Vec lhs;           // [a * dim + i], finite differences of ln pi_s
    Vec rhs;           // [a * dim + i], self-normalized posterior mean / sigma^2
    Vec se_lhs;
    Vec se_rhs;
    Vec se_paired;     // standard error of lhs - rhs under the shared draws
    Vec ess;           // [a], effective sample size of the importance weights
    double max_abs_dev = 0.0;
    /// max over (a, i) of |lhs - rhs| / sqrt(se_lhs^2 + se_rhs^2).
    double max_dev_combined_se = 0.0;
};

/// Requires sigma > 0, n_mc >= 1e4, fd_step > 0. Throws std::runtime_error when an
/// action's effective sample size falls below 100.
SteinResult stein_check(const OneLayerModel& model, std::span<const double> x, double sigma, std::size_t n_mc,
                        std::uint64_t seed, double fd_step = 1e-4);

// ---------------------------------------------------------------------------------------
// Conditions: alpha = min pi / pi_s, C = max |E_q delta|^2 / (d sigma^2), over sampled (a, x).

struct Conditions {
    double alpha = 1.0;
    double C = 0.0;
};

/// Throws std::runtime_error if some pi_s underflows to zero.
Conditions estimate_conditions(const OneLayerModel& model, double sigma, std::size_t n_mc,
                               const std::vector<Vec>& x_grid, std::uint64_t seed);

// ---------------------------------------------------------------------------------------
// KL bound: E KL(pi_s(.|x) || pi(.|x+zeta)) <= -ln alpha + C d E|zeta|^2 / (2 sigma^p), with
// zeta ~ N(0, (zeta_norm^2 / d) I). Both p = 2 and p = 4 are evaluated.

double kl_bound(double alpha, double C, std::size_t dim, double zeta_norm, double sigma, int sigma_exponent);

struct KlProbeConfig {
    std::vector<double> sigma_grid{0.1, 0.2, 0.4};
    std::vector<double> zeta_grid{0.01, 0.05};
    std::size_t n_mc = 1'000'000;   // delta draws per x point, also zeta draws per x point
    std::size_t n_x = 8;
    std::uint64_t seed = 1;
    double stderr_multiple = 3.0;

    void validate() const;
};

struct KlPoint {
    double sigma = 0.0;
    double zeta_norm = 0.0;
    double alpha = 0.0;
    double C = 0.0;
    double kl = 0.0;
    double kl_se = 0.0;
    double bound_sigma2 = 0.0;
    double bound_sigma4 = 0.0;
    bool holds_sigma2 = false;
    bool holds_sigma4 = false;
};

struct KlProbe {
    KlProbeConfig config;
    std::vector<KlPoint> points;
    bool all_hold_sigma2 = false;
    bool all_hold_sigma4 = false;
    /// "sigma2", "sigma4", "both" or "neither".
    std::string supported_exponent;
};

/// Throws std::runtime_error if an estimated alpha is 0.
KlProbe kl_bound_check(const OneLayerModel& model, const KlProbeConfig& config);

// ---------------------------------------------------------------------------------------
// Second-order KL: KL(pi(.|x) || pi(.|x+zeta)) ~ 1/2 zeta^T F(x) zeta, F the input Fisher.

/// F(x) = sum_a pi_a g_a g_a^T with g_a = grad_x ln pi(a|x); row-major dim x dim.
Vec input_fisher(const OneLayerModel& model, std::span<const double> x);

struct TaylorPoint {
    double zeta_norm = 0.0;
    double exact = 0.0;
    double approx = 0.0;
    double gap = 0.0;
};

struct TaylorResult {
    std::vector<TaylorPoint> points;
    /// Least-squares slope of ln|gap| on ln zeta_norm; NaN with fewer than two positive points.
    double slope = 0.0;
};

/// The same standard-normal draws are scaled to every zeta_norm, and the quadratic form uses
/// those draws, so the second-order term cancels draw by draw.
TaylorResult taylor_kl_check(const OneLayerModel& model, const std::vector<Vec>& x_grid,
                             std::span<const double> zeta_grid, std::size_t n_draws, std::uint64_t seed);

// ---------------------------------------------------------------------------------------
// Smoothness: sup_x |grad^2_theta J(theta; x)|_2 against its input-smoothed counterpart.

/// J(theta; x) for scalar x, with its gradient and dense Hessian in theta.
struct ScalarInputObjective {
    std::size_t n_params = 0;
    std::function<double(std::span<const double> theta, double x)> value;
    std::function<void(std::span<const double> theta, double x, std::span<double> grad)> gradient;
    /// Row-major n_params x n_params; used by oracles only.
    std::function<void(std::span<const double> theta, double x, std::span<double> hess)> hessian;
};

/// Policy softmax(W f(x)) over `actions` actions with features f(x) = (x, 1, h exp(-(x-c)^2/(2w^2))),
/// and J(theta; x) = sum_a pi(a|x) A_a: the importance-weighted surrogate E_{a~pi_infer}[pi/pi_infer A]
/// evaluated exactly. theta = W, row-major actions x 3. The feature bump is a narrow region of
/// high curvature in theta.
struct SpikeFamily {
    Vec advantages{1.0, -0.5, 0.25, -0.75};
    double spike_center = 0.3;
    double spike_width = 0.05;
    double spike_height = 4.0;

    std::size_t actions() const noexcept { return advantages.size(); }
    static constexpr std::size_t kFeatures = 3;
    Vec features(double x) const;
    ScalarInputObjective objective() const;
};

/// J(theta; x) = 1/2 theta^T M theta: curvature independent of x.
ScalarInputObjective quadratic_objective(Vec M, std::size_t n);

struct SmoothnessConfig {
    std::vector<double> x_grid;
    std::vector<double> sigma_grid{0.05, 0.1, 0.2};
    std::size_t n_mc = 1000;
    std::size_t stderr_batches = 10;
    std::uint64_t seed = 1;
    double hvp_step = 1e-5;
    double power_tol = 1e-10;

    void validate() const;
};

struct SmoothnessLevel {
    double sigma = 0.0;
    double sup_norm = 0.0;
    double argmax_x = 0.0;
    double sup_norm_se = 0.0;   // batch-means standard error at argmax_x
    double contraction = 0.0;   // sup_norm / raw sup_norm
};

struct SmoothnessResult {
    double raw_sup_norm = 0.0;
    double raw_argmax_x = 0.0;
    std::vector<SmoothnessLevel> levels;
    /// Smallest grid sigma with contraction < 1; NaN if none.
    double min_contracting_sigma = 0.0;
};

/// Spectral norm of the (smoothed) Hessian at one input by hvp power iteration. sigma = 0
/// means no smoothing; otherwise draws are sigma * z for the shared standard normals z.
double hessian_spectral_norm(const ScalarInputObjective& objective, std::span<const double> theta, double x,
                             double sigma, std::span<const double> z, double hvp_step, double power_tol);

/// Dense (smoothed) Hessian, averaged over the same draws. Oracle support.
Vec smoothed_hessian(const ScalarInputObjective& objective, std::span<const double> theta, double x, double sigma,
                     std::span<const double> z);

/// Throws std::runtime_error if power iteration does not converge within 200 iterations.
SmoothnessResult smoothness_check(const ScalarInputObjective& objective, std::span<const double> theta,
                                  const SmoothnessConfig& config);

// ---------------------------------------------------------------------------------------
// Landscape toy: a sum of Gaussian bumps convolved with N(0, sigma^2) by quadrature.

struct Bump {
    double center = 0.0;
    double width = 1.0;
    double height = 1.0;
};

double bumps_value(std::span<const Bump> bumps, double x);

struct LandscapeConfig {
    std::vector<Bump> bumps{{1.0, 0.02, 1.0}, {-1.0, 0.5, 0.8}};
    double x_lo = -2.5;
    double x_hi = 2.5;
    std::size_t x_points = 2501;
    std::size_t quad_nodes = 801;   // odd; trapezoid over [-span sigma, span sigma]
    double quad_span = 8.0;

    void validate() const;
    Vec x_grid() const;
};

/// f * N(0, sigma^2) on the grid; sigma = 0 returns f.
Vec smoothed_curve(const LandscapeConfig& config, double sigma);
/// Index of the bump nearest to the argmax of the smoothed curve.
std::size_t argmax_bump(const LandscapeConfig& config, double sigma);
/// Bisection for the sigma where argmax_bump changes from its value at lo. Throws
/// std::invalid_argument if lo and hi agree.
double switch_sigma(const LandscapeConfig& config, double lo, double hi, double tol = 1e-7);

struct LandscapeResult {
    Vec x;
    Vec f;
    std::vector<double> sigmas;
    std::vector<Vec> curves;
    Vec argmax_x;
    double sigma_star = 0.0;
};

LandscapeResult landscape_toy(const LandscapeConfig& config, std::span<const double> sigma_grid, double bracket_lo,
                              double bracket_hi);

// ---------------------------------------------------------------------------------------
// Reports.

nlohmann::json to_json(const SteinResult& r);
nlohmann::json to_json(const KlProbe& r);
nlohmann::json to_json(const TaylorResult& r);
nlohmann::json to_json(const SmoothnessResult& r);
nlohmann::json to_json(const LandscapeResult& r);
/// Columns x, f, then one column per sigma.
void write_landscape_csv(const LandscapeResult& r, std::ostream& out);

} // namespace alp::theorylab
