#include "alp/objectives/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace alp::objectives {
namespace {

template <class E, std::size_t N>
E parse_enum(const std::string& name, const E (&values)[N], const char* what)
{
    for (E v : values) {
        if (to_string(v) == name) {
            return v;
        }
    }
    throw std::invalid_argument(std::string("unknown ") + what + " '" + name + "'");
}

void require_finite_values(std::span<const double> v, const char* what)
{
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw num::NumericError(std::string("non-finite ") + what);
        }
    }
}

} // namespace

std::string to_string(Method m)
{
    switch (m) {
    case Method::grpo_token:
        return "grpo-token";
    case Method::gspo_geo:
        return "gspo-geo";
    case Method::token_mis:
        return "token-mis";
    case Method::seq_mis:
        return "seq-mis";
    case Method::seq_bypass:
        return "seq-bypass";
    case Method::token_alp:
        return "token-alp";
    case Method::seq_alp:
        return "seq-alp";
    }
    return "?";
}

const std::vector<Method>& all_methods()
{
    static const std::vector<Method> m{Method::grpo_token, Method::gspo_geo,   Method::token_mis, Method::seq_mis,
                                       Method::seq_bypass, Method::token_alp, Method::seq_alp};
    return m;
}

Method method_from_string(const std::string& name)
{
    const Method all[] = {Method::grpo_token, Method::gspo_geo,   Method::token_mis, Method::seq_mis,
                          Method::seq_bypass, Method::token_alp, Method::seq_alp};
    return parse_enum(name, all, "method");
}

std::string to_string(Aggregation a)
{
    switch (a) {
    case Aggregation::token:
        return "token";
    case Aggregation::sequence:
        return "sequence";
    case Aggregation::geometric_mean:
        return "geometric-mean";
    }
    return "?";
}

Aggregation aggregation_from_string(const std::string& name)
{
    const Aggregation all[] = {Aggregation::token, Aggregation::sequence, Aggregation::geometric_mean};
    return parse_enum(name, all, "aggregation");
}

std::string to_string(MaskLevel l)
{
    return l == MaskLevel::token ? "token" : "sequence";
}

MaskLevel mask_level_from_string(const std::string& name)
{
    const MaskLevel all[] = {MaskLevel::token, MaskLevel::sequence};
    return parse_enum(name, all, "mask level");
}

std::string to_string(SeqClipMode m)
{
    return m == SeqClipMode::absolute ? "absolute" : "relative";
}

SeqClipMode seq_clip_mode_from_string(const std::string& name)
{
    const SeqClipMode all[] = {SeqClipMode::absolute, SeqClipMode::relative};
    return parse_enum(name, all, "sequence clip mode");
}

Wiring wiring(Method m)
{
    switch (m) {
    case Method::grpo_token:
        return {EngineTag::train, Denominator::train_old, false, Aggregation::token};
    case Method::gspo_geo:
        return {EngineTag::train, Denominator::train_old, false, Aggregation::geometric_mean};
    case Method::token_mis:
        return {EngineTag::train, Denominator::train_old, true, Aggregation::token};
    case Method::seq_mis:
        return {EngineTag::train, Denominator::train_old, true, Aggregation::sequence};
    case Method::seq_bypass:
        return {EngineTag::train, Denominator::infer, false, Aggregation::sequence};
    case Method::token_alp:
        return {EngineTag::train_perturbed, Denominator::infer, false, Aggregation::token};
    case Method::seq_alp:
        return {EngineTag::train_perturbed, Denominator::infer, false, Aggregation::sequence};
    }
    throw std::invalid_argument("unknown method");
}

void ObjectiveConfig::validate() const
{
    auto fail = [](const std::string& msg) { throw std::invalid_argument("objective config: " + msg); };
    if (!(eps_lo > 0.0 && eps_lo < 1.0)) {
        fail("eps_lo must lie in (0, 1)");
    }
    if (!(eps_hi > 0.0)) {
        fail("eps_hi must be positive");
    }
    if (!(mask_threshold > 1.0)) {
        fail("mask_threshold must exceed 1");
    }
    if (!(dual_clip_c > 1.0 + eps_hi)) {
        fail("dual_clip_c must exceed 1 + eps_hi");
    }
    if (!(seq_clip_lo > 0.0 && seq_clip_lo < 1.0 && seq_clip_hi > 1.0)) {
        fail("sequence clip bounds must satisfy 0 < lo < 1 < hi");
    }
    if (seq_clip_mode == SeqClipMode::absolute && effective_aggregation() == Aggregation::sequence &&
        !(dual_clip_c > seq_clip_hi)) {
        fail("dual_clip_c must exceed the sequence clip upper bound");
    }
    if (!(kl_coef >= 0.0) || !(entropy_coef >= 0.0)) {
        fail("kl_coef and entropy_coef must be >= 0");
    }
}

std::pair<double, double> ObjectiveConfig::clip_bounds() const
{
    if (effective_aggregation() == Aggregation::sequence && seq_clip_mode == SeqClipMode::absolute) {
        return {seq_clip_lo, seq_clip_hi};
    }
    return {1.0 - eps_lo, 1.0 + eps_hi};
}

std::vector<double> group_advantage(std::span<const double> rewards, std::size_t group_size, double std_floor)
{
    if (group_size < 2) {
        throw std::invalid_argument("group advantage needs groups of at least 2 responses");
    }
    if (rewards.size() % group_size != 0) {
        throw std::invalid_argument("reward count is not a multiple of the group size");
    }
    if (!(std_floor > 0.0)) {
        throw std::invalid_argument("std_floor must be positive");
    }
    std::vector<double> out(rewards.size());
    const auto n = static_cast<double>(group_size);
    for (std::size_t g = 0; g < rewards.size(); g += group_size) {
        double mean = 0.0;
        for (std::size_t j = 0; j < group_size; ++j) {
            mean += rewards[g + j];
        }
        mean /= n;
        double var = 0.0;
        for (std::size_t j = 0; j < group_size; ++j) {
            var += (rewards[g + j] - mean) * (rewards[g + j] - mean);
        }
        const double sd = std::max(std::sqrt(var / n), std_floor);
        for (std::size_t j = 0; j < group_size; ++j) {
            out[g + j] = (rewards[g + j] - mean) / sd;
        }
    }
    return out;
}

std::vector<double> token_ratio(const TokenLogProbs& num, const TokenLogProbs& den)
{
    if (num.values.size() != den.values.size()) {
        throw std::invalid_argument("token_ratio: numerator has " + std::to_string(num.values.size()) +
                                    " positions, denominator " + std::to_string(den.values.size()));
    }
    require_finite_values(num.values, "numerator log-prob");
    require_finite_values(den.values, "denominator log-prob");
    std::vector<double> out(num.values.size());
    for (std::size_t t = 0; t < out.size(); ++t) {
        out[t] = num.values[t] - den.values[t];
    }
    return out;
}

double seq_ratio(std::span<const double> token_log_ratios)
{
    if (token_log_ratios.empty()) {
        throw std::invalid_argument("seq_ratio of an empty response");
    }
    double s = 0.0;
    for (double v : token_log_ratios) {
        s += v;
    }
    return s;
}

double gspo_ratio(std::span<const double> token_log_ratios, std::size_t length)
{
    if (length == 0) {
        throw std::invalid_argument("gspo_ratio of an empty response");
    }
    return std::exp(seq_ratio(token_log_ratios) / static_cast<double>(length));
}

std::vector<double> alp_ratio(const TokenLogProbs& perturbed, const TokenLogProbs& infer)
{
    if (perturbed.tag != EngineTag::train_perturbed || infer.tag != EngineTag::infer) {
        throw std::invalid_argument("alp_ratio expects train_perturbed / infer log-probs, got " +
                                    engines::to_string(perturbed.tag) + " / " + engines::to_string(infer.tag));
    }
    return token_ratio(perturbed, infer);
}

std::vector<std::vector<bool>> mis_mask(const std::vector<std::vector<double>>& log_rho_prime, double C,
                                        MaskLevel level)
{
    if (!(C > 0.0)) {
        throw std::invalid_argument("mask threshold must be positive");
    }
    const double log_c = std::log(C);
    std::vector<std::vector<bool>> out;
    for (const auto& seq : log_rho_prime) {
        if (level == MaskLevel::token) {
            std::vector<bool> m(seq.size());
            for (std::size_t t = 0; t < seq.size(); ++t) {
                m[t] = seq[t] > log_c;
            }
            out.push_back(std::move(m));
        } else {
            double s = 0.0;
            for (double v : seq) {
                s += v;
            }
            out.emplace_back(seq.size(), s > log_c);
        }
    }
    return out;
}

double clipped_surrogate(double log_rho, double advantage, double lo, double hi, double dual_c, double* dlog,
                         bool* clipped)
{
    double s = 0.0, d = 0.0;
    bool c = false;
    if (advantage > 0.0) {
        // min(rho, clip(rho)) = min(rho, hi)
        if (log_rho < std::log(hi)) {
            s = std::exp(log_rho) * advantage;
            d = s;
        } else {
            s = hi * advantage;
            c = true;
        }
    } else if (advantage < 0.0) {
        // max(min(rho A, clip(rho) A), c A) = A * min(max(rho, lo), c)
        if (log_rho <= std::log(lo)) {
            s = lo * advantage;
            c = true;
        } else if (log_rho >= std::log(dual_c)) {
            s = dual_c * advantage;
            c = true;
        } else {
            s = std::exp(log_rho) * advantage;
            d = s;
        }
    }
    if (dlog != nullptr) {
        *dlog = d;
    }
    if (clipped != nullptr) {
        *clipped = c;
    }
    return s;
}

LossResult assemble_loss(const ObjectiveConfig& config, std::span<const SequenceInputs> batch)
{
    config.validate();
    const Wiring w = wiring(config.method);
    const Aggregation agg = config.effective_aggregation();
    const auto [lo, hi] = config.clip_bounds();

    LossResult r;
    RatioSet& rs = r.ratios;
    for (const SequenceInputs& s : batch) {
        const std::size_t n = s.lp_num.size();
        if (s.lp_old.size() != n || s.lp_infer.size() != n || s.entropy.size() != n || s.valid.size() != n) {
            throw std::invalid_argument("assemble_loss: per-token inputs disagree in length");
        }
        for (std::size_t t = 0; t < n; ++t) {
            if (s.valid[t] && !(std::isfinite(s.lp_num[t]) && std::isfinite(s.lp_old[t]) &&
                                std::isfinite(s.lp_infer[t]) && std::isfinite(s.entropy[t]))) {
                throw num::NumericError("non-finite loss input at a model token");
            }
        }
        if (!std::isfinite(s.advantage)) {
            throw num::NumericError("non-finite advantage");
        }
        std::vector<double> tok(n), prime(n);
        for (std::size_t t = 0; t < n; ++t) {
            const double den = w.denominator == Denominator::train_old ? s.lp_old[t] : s.lp_infer[t];
            tok[t] = s.valid[t] ? s.lp_num[t] - den : 0.0;
            prime[t] = s.valid[t] ? s.lp_old[t] - s.lp_infer[t] : 0.0;
        }
        rs.token_log.push_back(std::move(tok));
        rs.prime_log.push_back(std::move(prime));
    }
    if (w.mis_mask) {
        rs.masked = mis_mask(rs.prime_log, config.mask_threshold, config.effective_mis_level());
    } else {
        for (const auto& p : rs.prime_log) {
            rs.masked.emplace_back(p.size(), false);
        }
    }

    // Token units: valid and not masked.
    std::size_t valid_tokens = 0, masked_tokens = 0, open_tokens = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        for (std::size_t t = 0; t < batch[i].valid.size(); ++t) {
            if (batch[i].valid[t]) {
                ++valid_tokens;
                rs.masked[i][t] ? ++masked_tokens : ++open_tokens;
            }
        }
    }
    r.mis_masked_frac = valid_tokens == 0 ? 0.0 : static_cast<double>(masked_tokens) / valid_tokens;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        r.d_lp_num.emplace_back(batch[i].lp_num.size(), 0.0);
        r.d_entropy.emplace_back(batch[i].lp_num.size(), 0.0);
        rs.clipped.emplace_back(batch[i].lp_num.size(), false);
    }
    rs.seq_clipped.assign(batch.size(), false);
    rs.seq_log.assign(batch.size(), 0.0);

    double surrogate_sum = 0.0;
    std::size_t clipped_units = 0;
    if (agg == Aggregation::token) {
        r.units = open_tokens;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            for (std::size_t t = 0; t < batch[i].valid.size(); ++t) {
                if (!batch[i].valid[t] || rs.masked[i][t]) {
                    continue;
                }
                double d = 0.0;
                bool c = false;
                surrogate_sum +=
                    clipped_surrogate(rs.token_log[i][t], batch[i].advantage, lo, hi, config.dual_clip_c, &d, &c);
                rs.clipped[i][t] = c;
                clipped_units += c;
                r.d_lp_num[i][t] = -d / static_cast<double>(open_tokens);
            }
        }
    } else {
        std::vector<std::size_t> counts(batch.size(), 0);
        for (std::size_t i = 0; i < batch.size(); ++i) {
            for (std::size_t t = 0; t < batch[i].valid.size(); ++t) {
                if (batch[i].valid[t] && !rs.masked[i][t]) {
                    rs.seq_log[i] += rs.token_log[i][t];
                    ++counts[i];
                }
            }
            r.units += counts[i] > 0;
        }
        for (std::size_t i = 0; i < batch.size(); ++i) {
            if (counts[i] == 0) {
                continue;
            }
            const double scale = agg == Aggregation::geometric_mean ? 1.0 / static_cast<double>(counts[i]) : 1.0;
            double d = 0.0;
            bool c = false;
            surrogate_sum +=
                clipped_surrogate(rs.seq_log[i] * scale, batch[i].advantage, lo, hi, config.dual_clip_c, &d, &c);
            rs.seq_clipped[i] = c;
            clipped_units += c;
            for (std::size_t t = 0; t < batch[i].valid.size(); ++t) {
                if (batch[i].valid[t] && !rs.masked[i][t]) {
                    r.d_lp_num[i][t] = -d * scale / static_cast<double>(r.units);
                }
            }
        }
    }
    r.surrogate = r.units == 0 ? 0.0 : surrogate_sum / static_cast<double>(r.units);
    r.clip_frac = r.units == 0 ? 0.0 : static_cast<double>(clipped_units) / static_cast<double>(r.units);

    // Entropy bonus and k3 penalty over unmasked valid tokens.
    double ent_sum = 0.0, kl_sum = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        for (std::size_t t = 0; t < batch[i].valid.size(); ++t) {
            if (!batch[i].valid[t] || rs.masked[i][t]) {
                continue;
            }
            const double delta = batch[i].lp_old[t] - batch[i].lp_num[t];
            const double e = std::exp(delta);
            ent_sum += batch[i].entropy[t];
            kl_sum += e - delta - 1.0;
            const double inv = 1.0 / static_cast<double>(open_tokens);
            r.d_entropy[i][t] = -config.entropy_coef * inv;
            r.d_lp_num[i][t] += config.kl_coef * (1.0 - e) * inv;
        }
    }
    if (open_tokens > 0) {
        r.entropy = ent_sum / static_cast<double>(open_tokens);
        r.kl = kl_sum / static_cast<double>(open_tokens);
    }
    r.loss = -r.surrogate - config.entropy_coef * r.entropy + config.kl_coef * r.kl;
    if (!std::isfinite(r.loss)) {
        throw num::NumericError("non-finite loss");
    }
    return r;
}

} // namespace alp::objectives
