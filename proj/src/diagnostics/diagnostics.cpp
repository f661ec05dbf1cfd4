#include "alp/diagnostics/diagnostics.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace alp::diagnostics {
namespace {

void require_same_length(std::size_t a, std::size_t b, const char* what)
{
    if (a != b) {
        throw std::invalid_argument(std::string(what) + ": length mismatch (" + std::to_string(a) + " vs " +
                                    std::to_string(b) + ")");
    }
}

double sorted_quantile(const std::vector<double>& sorted, double level)
{
    if (!(level >= 0.0 && level <= 100.0)) {
        throw std::invalid_argument("quantile level must lie in [0, 100]");
    }
    const double pos = level / 100.0 * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

// Exact binomial coefficient, or +inf on overflow.
double binomial(std::size_t n, std::size_t k)
{
    if (k > n) {
        return 0.0;
    }
    k = std::min(k, n - k);
    unsigned __int128 acc = 1;
    for (std::size_t i = 1; i <= k; ++i) {
        acc = acc * (n - k + i) / i;
        if (acc > (static_cast<unsigned __int128>(1) << 100)) {
            return std::numeric_limits<double>::infinity();
        }
    }
    return static_cast<double>(acc);
}

} // namespace

double kl_estimate(std::span<const double> lp_p, std::span<const double> lp_q, KlEstimator estimator)
{
    require_same_length(lp_p.size(), lp_q.size(), "kl_estimate");
    if (lp_p.empty()) {
        return 0.0;
    }
    double s = 0.0;
    for (std::size_t i = 0; i < lp_p.size(); ++i) {
        const double d = lp_q[i] - lp_p[i];
        s += estimator == KlEstimator::k1 ? -d : std::expm1(d) - d;
    }
    return s / static_cast<double>(lp_p.size());
}

double quantile(std::vector<double> values, double level)
{
    const double lv[] = {level};
    return quantiles(std::move(values), lv)[0];
}

std::vector<double> quantiles(std::vector<double> values, std::span<const double> levels)
{
    if (values.empty()) {
        throw std::invalid_argument("quantile of an empty sample");
    }
    std::sort(values.begin(), values.end());
    std::vector<double> out;
    for (double l : levels) {
        out.push_back(sorted_quantile(values, l));
    }
    return out;
}

void EnvelopeSpec::validate() const
{
    if (edges.empty() || edges.back() != 1.0 || !(edges.front() > 0.0)) {
        throw std::invalid_argument("envelope edges must be positive and end at 1");
    }
    for (std::size_t i = 1; i < edges.size(); ++i) {
        if (!(edges[i] > edges[i - 1])) {
            throw std::invalid_argument("envelope edges must be strictly increasing");
        }
    }
    if (levels.empty()) {
        throw std::invalid_argument("envelope needs at least one quantile level");
    }
    for (std::size_t i = 0; i < levels.size(); ++i) {
        if (!(levels[i] >= 0.0 && levels[i] <= 100.0) || (i > 0 && !(levels[i] > levels[i - 1]))) {
            throw std::invalid_argument("quantile levels must be strictly increasing in [0, 100]");
        }
    }
}

std::size_t EnvelopeSpec::bin_of(double prob) const
{
    if (!(prob > 0.0 && prob <= 1.0)) {
        throw std::invalid_argument("rollout probability outside (0, 1]");
    }
    return static_cast<std::size_t>(std::lower_bound(edges.begin(), edges.end(), prob) - edges.begin());
}

std::size_t Envelope::total_count() const
{
    std::size_t n = 0;
    for (const auto& b : bins) {
        n += b.count;
    }
    return n;
}

const EnvelopeBin* Envelope::find(std::size_t index) const
{
    for (const auto& b : bins) {
        if (b.index == index) {
            return &b;
        }
    }
    return nullptr;
}

Envelope ratio_envelope(std::span<const double> log_ratios, std::span<const double> rollout_probs,
                        const EnvelopeSpec& spec)
{
    spec.validate();
    require_same_length(log_ratios.size(), rollout_probs.size(), "ratio_envelope");
    std::vector<std::vector<double>> per_bin(spec.edges.size());
    for (std::size_t i = 0; i < log_ratios.size(); ++i) {
        per_bin[spec.bin_of(rollout_probs[i])].push_back(log_ratios[i]);
    }
    Envelope env{spec, {}};
    for (std::size_t b = 0; b < per_bin.size(); ++b) {
        if (per_bin[b].empty()) {
            continue;
        }
        EnvelopeBin bin;
        bin.index = b;
        bin.lo = b == 0 ? 0.0 : spec.edges[b - 1];
        bin.hi = spec.edges[b];
        bin.count = per_bin[b].size();
        std::vector<double> abs_vals;
        for (double v : per_bin[b]) {
            abs_vals.push_back(std::abs(v));
        }
        bin.abs_p99 = quantile(std::move(abs_vals), 99.0);
        bin.quantiles = quantiles(std::move(per_bin[b]), spec.levels);
        env.bins.push_back(std::move(bin));
    }
    return env;
}

std::string envelope_to_json(const Envelope& env)
{
    nlohmann::json j;
    j["edges"] = env.spec.edges;
    j["levels"] = env.spec.levels;
    j["bins"] = nlohmann::json::array();
    for (const auto& b : env.bins) {
        j["bins"].push_back({{"index", b.index},
                             {"lo", b.lo},
                             {"hi", b.hi},
                             {"count", b.count},
                             {"quantiles", b.quantiles},
                             {"abs_p99", b.abs_p99}});
    }
    return j.dump(2);
}

Envelope envelope_from_json(const std::string& text)
{
    const auto j = nlohmann::json::parse(text);
    Envelope env;
    env.spec.edges = j.at("edges").get<std::vector<double>>();
    env.spec.levels = j.at("levels").get<std::vector<double>>();
    env.spec.validate();
    for (const auto& b : j.at("bins")) {
        EnvelopeBin bin;
        bin.index = b.at("index").get<std::size_t>();
        bin.lo = b.at("lo").get<double>();
        bin.hi = b.at("hi").get<double>();
        bin.count = b.at("count").get<std::size_t>();
        bin.quantiles = b.at("quantiles").get<std::vector<double>>();
        bin.abs_p99 = b.at("abs_p99").get<double>();
        env.bins.push_back(std::move(bin));
    }
    return env;
}

double mean_entropy(std::span<const double> log_probs, std::size_t vocab)
{
    if (vocab == 0 || log_probs.size() % vocab != 0) {
        throw std::invalid_argument("mean_entropy: table size is not a multiple of the vocabulary");
    }
    const std::size_t rows = log_probs.size() / vocab;
    if (rows == 0) {
        return 0.0;
    }
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        double h = 0.0;
        for (std::size_t v = 0; v < vocab; ++v) {
            const double l = log_probs[r * vocab + v];
            if (l > -std::numeric_limits<double>::infinity()) {
                h -= std::exp(l) * l;
            }
        }
        total += h;
    }
    return total / static_cast<double>(rows);
}

double pass_at_k(std::span<const std::size_t> correct, std::size_t n, std::size_t k)
{
    if (k == 0 || k > n) {
        throw std::invalid_argument("pass_at_k needs 1 <= k <= n");
    }
    if (correct.empty()) {
        return 0.0;
    }
    double total = 0.0;
    for (std::size_t c : correct) {
        if (c > n) {
            throw std::invalid_argument("pass_at_k: more correct samples than samples");
        }
        const double all = binomial(n, k);
        if (std::isfinite(all)) {
            total += (all - binomial(n - c, k)) / all;
        } else {
            double miss = 1.0;
            for (std::size_t i = n - c + 1; i <= n; ++i) {
                miss *= 1.0 - static_cast<double>(k) / static_cast<double>(i);
            }
            total += 1.0 - miss;
        }
    }
    return total / static_cast<double>(correct.size());
}

ShiftStats perturb_shift_stats(std::span<const double> lp_perturbed, std::span<const double> lp_unperturbed)
{
    require_same_length(lp_perturbed.size(), lp_unperturbed.size(), "perturb_shift_stats");
    if (lp_perturbed.empty()) {
        return {};
    }
    std::vector<double> d(lp_perturbed.size());
    double s = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] = std::abs(std::exp(lp_perturbed[i]) - std::exp(lp_unperturbed[i]));
    }
    std::sort(d.begin(), d.end());
    for (double v : d) {
        s += v;
    }
    return {s / static_cast<double>(d.size()), sorted_quantile(d, 75.0), sorted_quantile(d, 99.0)};
}

double pearson(std::span<const double> x, std::span<const double> y)
{
    require_same_length(x.size(), y.size(), "pearson");
    if (x.size() < 2) {
        return 0.0;
    }
    const auto n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) {
        return 0.0;
    }
    return sxy / std::sqrt(sxx * syy);
}

std::vector<double> moving_average(std::span<const double> series, std::size_t window)
{
    if (window == 0) {
        throw std::invalid_argument("moving_average window must be positive");
    }
    std::vector<double> out(series.size());
    for (std::size_t i = 0; i < series.size(); ++i) {
        const std::size_t start = i + 1 >= window ? i + 1 - window : 0;
        double s = 0.0;
        for (std::size_t j = start; j <= i; ++j) {
            s += series[j];
        }
        out[i] = s / static_cast<double>(i + 1 - start);
    }
    return out;
}

} // namespace alp::diagnostics
