#include "alp/policy/policy.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace alp::policy {
namespace {

constexpr const char* kBlockTensors[] = {"ln1_g",   "ln1_b",     "qkv",    "qkv_b",    "attn_out", "attn_out_b",
                                         "ln2_g",   "ln2_b",     "mlp_in", "mlp_in_b", "mlp_out",  "mlp_out_b"};
constexpr std::size_t kPerBlock = std::size(kBlockTensors);

// Index of a per-block tensor in the flat weight list: wte, wpe, blocks..., lnf_g, lnf_b, lm_head.
std::size_t block_index(int layer, std::size_t slot)
{
    return 2 + static_cast<std::size_t>(layer) * kPerBlock + slot;
}

enum Slot : std::size_t { ln1_g, ln1_b, qkv, qkv_b, attn_out, attn_out_b, ln2_g, ln2_b, mlp_in, mlp_in_b, mlp_out, mlp_out_b };

Tensor gaussian(num::Shape shape, double stddev, num::Rng& rng)
{
    Tensor t(std::move(shape));
    std::normal_distribution<double> n(0.0, stddev);
    for (double& v : t.data()) {
        v = n(rng);
    }
    return t;
}

void fill_rows(Tensor& dst, std::size_t row, const std::vector<double>& values, double factor)
{
    double* p = dst.ptr() + row * dst.cols();
    for (std::size_t j = 0; j < values.size(); ++j) {
        p[j] = factor * values[j];
    }
}

} // namespace

void PolicyConfig::validate() const
{
    if (vocab_size < 4 || context_len < 2 || n_layers < 1 || d_model < 1 || n_heads < 1 || d_model % n_heads != 0 ||
        !(ln_eps > 0.0)) {
        throw std::invalid_argument("invalid policy config: need vocab_size >= 4, context_len >= 2, n_layers >= 1, "
                                    "d_model divisible by n_heads, ln_eps > 0");
    }
}

PolicyParams PolicyParams::init(const PolicyConfig& config, std::uint64_t seed, double sigma_init,
                                const InitScales& scales)
{
    config.validate();
    if (!(sigma_init > 0.0) || !std::isfinite(sigma_init)) {
        throw std::invalid_argument("sigma_init must be positive and finite");
    }
    const auto v = static_cast<std::size_t>(config.vocab_size);
    const auto d = static_cast<std::size_t>(config.d_model);
    const auto ctx = static_cast<std::size_t>(config.context_len);
    const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
    const double out_std = in_std / std::sqrt(2.0 * config.n_layers);
    num::Rng rng(num::derive_seed(seed, {0x706f6cULL}));

    PolicyParams p;
    p.config = config;
    auto add = [&p](std::string name, Tensor t) {
        p.names.push_back(std::move(name));
        p.weights.push_back(std::move(t));
    };
    add("wte", gaussian({v, d}, scales.token_embedding, rng));
    add("wpe", gaussian({ctx, d}, scales.position_embedding, rng));
    for (int h = 0; h < config.n_layers; ++h) {
        const std::string pre = "h" + std::to_string(h) + ".";
        add(pre + "ln1_g", Tensor::full({d}, 1.0));
        add(pre + "ln1_b", Tensor({d}));
        add(pre + "qkv", gaussian({d, 3 * d}, in_std, rng));
        add(pre + "qkv_b", Tensor({3 * d}));
        add(pre + "attn_out", gaussian({d, d}, out_std, rng));
        add(pre + "attn_out_b", Tensor({d}));
        add(pre + "ln2_g", Tensor::full({d}, 1.0));
        add(pre + "ln2_b", Tensor({d}));
        add(pre + "mlp_in", gaussian({d, 4 * d}, in_std, rng));
        add(pre + "mlp_in_b", Tensor({4 * d}));
        add(pre + "mlp_out", gaussian({4 * d, d}, out_std / 2.0, rng));
        add(pre + "mlp_out_b", Tensor({d}));
    }
    add("lnf_g", Tensor::full({d}, 1.0));
    add("lnf_b", Tensor({d}));
    add("lm_head", gaussian({d, v}, scales.lm_head, rng));
    p.perturb_log_sigma = Tensor::full({static_cast<std::size_t>(config.n_layers) + 1}, std::log(sigma_init));
    return p;
}

std::size_t PolicyParams::index_of(const std::string& name) const
{
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) {
        throw std::out_of_range("no policy tensor named '" + name + "'");
    }
    return static_cast<std::size_t>(it - names.begin());
}

std::size_t PolicyParams::parameter_count() const
{
    std::size_t n = 0;
    for (const auto& w : weights) {
        n += w.size();
    }
    return n;
}

void PerturbationSpec::validate(int n_layers) const
{
    if (mode == PerturbMode::layer_band && !(0 <= band_lo && band_lo <= band_hi && band_hi < n_layers)) {
        throw std::invalid_argument("layer band [" + std::to_string(band_lo) + ", " + std::to_string(band_hi) +
                                    "] outside 0.." + std::to_string(n_layers - 1));
    }
}

bool PerturbationSpec::includes(int target, int n_layers) const
{
    switch (mode) {
    case PerturbMode::none:
        return false;
    case PerturbMode::all_layers:
        return target >= 0 && target < n_layers;
    case PerturbMode::layer_band:
        return target >= band_lo && target <= band_hi;
    case PerturbMode::logits_only:
        return target == n_layers;
    }
    return false;
}

std::vector<int> PerturbationSpec::targets(int n_layers) const
{
    validate(n_layers);
    std::vector<int> out;
    for (int t = 0; t <= n_layers; ++t) {
        if (includes(t, n_layers)) {
            out.push_back(t);
        }
    }
    return out;
}

std::string to_string(PerturbMode mode)
{
    switch (mode) {
    case PerturbMode::none:
        return "none";
    case PerturbMode::all_layers:
        return "all-layers";
    case PerturbMode::layer_band:
        return "layer-band";
    case PerturbMode::logits_only:
        return "logits-only";
    }
    return "?";
}

PerturbMode perturb_mode_from_string(const std::string& name)
{
    for (auto m : {PerturbMode::none, PerturbMode::all_layers, PerturbMode::layer_band, PerturbMode::logits_only}) {
        if (to_string(m) == name) {
            return m;
        }
    }
    throw std::invalid_argument("unknown perturbation mode '" + name + "'");
}

std::vector<double> PerturbationDraw::values(SequenceKey key, int target, std::size_t position,
                                             std::size_t width) const
{
    if (zero) {
        return std::vector<double>(width, 0.0);
    }
    num::GaussianStream g(num::derive_seed(seed, {key.prompt, key.sample, static_cast<std::uint64_t>(target),
                                                  static_cast<std::uint64_t>(position)}));
    std::vector<double> out(width);
    for (double& v : out) {
        v = g();
    }
    return out;
}

std::vector<double> zeta_values(std::uint64_t seed, SequenceKey key, std::size_t position, std::size_t width)
{
    num::GaussianStream g(num::derive_seed(seed, {0x7a657461ULL, key.prompt, key.sample, position}));
    std::vector<double> out(width);
    for (double& v : out) {
        v = g();
    }
    return out;
}

BoundParams bind(num::Tape& tape, const PolicyParams& params)
{
    BoundParams b;
    b.params = &params;
    for (const auto& w : params.weights) {
        b.weights.push_back(tape.leaf_view(w));
    }
    b.log_sigma = tape.leaf_view(params.perturb_log_sigma);
    return b;
}

Var forward_log_softmax(const BoundParams& bound, const SequenceBatch& batch,
                        std::span<const std::size_t> rows, const ForwardOptions& options)
{
    const PolicyConfig& cfg = bound.params->config;
    const std::size_t n_seq = batch.batch(), len = batch.length;
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto vocab = static_cast<std::size_t>(cfg.vocab_size);
    const int n_layers = cfg.n_layers;
    if (len == 0 || len > static_cast<std::size_t>(cfg.context_len)) {
        throw num::ShapeError("sequence length " + std::to_string(len) + " outside 1.." +
                              std::to_string(cfg.context_len));
    }
    if (batch.tokens.size() != n_seq * len) {
        throw num::ShapeError("token buffer does not match batch layout");
    }
    options.perturb.validate(n_layers);
    const bool perturbed = options.perturb.mode != PerturbMode::none && options.draw.has_value();
    const auto& w = bound.weights;
    const std::size_t total = n_seq * len;

    std::vector<int> positions(total);
    for (std::size_t r = 0; r < total; ++r) {
        positions[r] = static_cast<int>(r % len);
    }
    Var x = num::add(num::embedding(w[0], batch.tokens), num::embedding(w[1], positions));

    auto row_noise = [&](std::size_t width, auto&& gen) {
        Tensor noise({total, width});
        for (std::size_t r = 0; r < total; ++r) {
            fill_rows(noise, r, gen(batch.keys[r / len], r % len), 1.0);
        }
        return noise;
    };

    if (options.engine.zeta_std > 0.0) {
        const double s = options.engine.zeta_std;
        Tensor zeta({total, d});
        for (std::size_t r = 0; r < total; ++r) {
            fill_rows(zeta, r, zeta_values(options.engine.zeta_seed, batch.keys[r / len], r % len, d), s);
        }
        x = num::add_constant(x, zeta);
    }

    for (int h = 0; h < n_layers; ++h) {
        if (perturbed && options.perturb.includes(h, n_layers)) {
            const Tensor noise =
                row_noise(d, [&](SequenceKey k, std::size_t t) { return options.draw->values(k, h, t, d); });
            x = num::add_scaled_noise(x, bound.log_sigma, static_cast<std::size_t>(h), noise);
        }
        if (options.capture_hidden != nullptr) {
            options.capture_hidden->push_back(x.value());
        }
        auto W = [&](std::size_t slot) { return w[block_index(h, slot)]; };
        Var a = num::layer_norm(x, W(ln1_g), W(ln1_b), cfg.ln_eps);
        Var qkv_v = num::add_bias(num::matmul(a, W(qkv)), W(qkv_b));
        Var att = num::causal_self_attention(qkv_v, n_seq, len, static_cast<std::size_t>(cfg.n_heads));
        x = num::add(x, num::add_bias(num::matmul(att, W(attn_out)), W(attn_out_b)));
        Var m = num::layer_norm(x, W(ln2_g), W(ln2_b), cfg.ln_eps);
        Var hidden = num::gelu(num::add_bias(num::matmul(m, W(mlp_in)), W(mlp_in_b)));
        x = num::add(x, num::add_bias(num::matmul(hidden, W(mlp_out)), W(mlp_out_b)));
    }
    if (options.capture_hidden != nullptr) {
        options.capture_hidden->push_back(x.value());
    }
    const std::size_t tail = 2 + static_cast<std::size_t>(n_layers) * kPerBlock;
    Var f = num::layer_norm(x, w[tail], w[tail + 1], cfg.ln_eps);
    Var logits = num::matmul(num::gather_rows(f, rows), w[tail + 2]);
    if (perturbed && options.perturb.includes(n_layers, n_layers)) {
        Tensor noise({rows.size(), vocab});
        for (std::size_t i = 0; i < rows.size(); ++i) {
            fill_rows(noise, i, options.draw->values(batch.keys[rows[i] / len], n_layers, rows[i] % len, vocab), 1.0);
        }
        logits = num::add_scaled_noise(logits, bound.log_sigma, static_cast<std::size_t>(n_layers), noise);
    }
    if (options.engine.round_bits) {
        logits = num::round_mantissa(logits, *options.engine.round_bits);
    }
    return num::log_softmax_rows(logits);
}

namespace {

void check_tokens(const PolicyConfig& cfg, std::span<const int> tokens, std::size_t prompt_len)
{
    if (prompt_len == 0 || prompt_len > tokens.size()) {
        throw std::invalid_argument("prompt length must be in 1..|tokens|");
    }
    if (tokens.size() > static_cast<std::size_t>(cfg.context_len)) {
        throw num::ShapeError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds context " +
                              std::to_string(cfg.context_len));
    }
    for (int t : tokens) {
        if (t < 0 || t >= cfg.vocab_size) {
            throw num::ShapeError("token " + std::to_string(t) + " outside vocabulary");
        }
    }
}

std::vector<double> token_logprobs(const Tensor& lsm, std::span<const int> tokens, std::size_t prompt_len)
{
    std::vector<double> out;
    for (std::size_t t = prompt_len; t < tokens.size(); ++t) {
        out.push_back(lsm.at(t - prompt_len, static_cast<std::size_t>(tokens[t])));
    }
    return out;
}

std::vector<std::size_t> response_rows(std::size_t prompt_len, std::size_t n)
{
    std::vector<std::size_t> rows;
    for (std::size_t t = prompt_len; t < n; ++t) {
        rows.push_back(t - 1);
    }
    return rows;
}

} // namespace

std::vector<double> logprobs(const PolicyParams& params, std::span<const int> tokens, std::size_t prompt_len,
                             const std::optional<PerturbationDraw>& draw, const PerturbationSpec& spec,
                             SequenceKey key)
{
    check_tokens(params.config, tokens, prompt_len);
    if (tokens.size() == prompt_len) {
        return {};
    }
    num::Tape tape(false);
    const BoundParams bound = bind(tape, params);
    SequenceBatch batch{tokens.size(), std::vector<int>(tokens.begin(), tokens.end()), {key}};
    ForwardOptions opt;
    opt.perturb = spec;
    opt.draw = draw;
    const auto rows = response_rows(prompt_len, tokens.size());
    return token_logprobs(forward_log_softmax(bound, batch, rows, opt).value(), tokens, prompt_len);
}

std::vector<double> logprobs_smoothed(const PolicyParams& params, std::span<const int> tokens,
                                      std::size_t prompt_len, const PerturbationSpec& spec,
                                      std::size_t n_samples, std::uint64_t base_seed, SequenceKey key)
{
    if (n_samples == 0) {
        throw std::invalid_argument("logprobs_smoothed needs n_samples >= 1");
    }
    if (n_samples == 1) {
        return logprobs(params, tokens, prompt_len, PerturbationDraw{base_seed}, spec, key);
    }
    std::vector<std::vector<double>> per_draw;
    for (std::size_t k = 0; k < n_samples; ++k) {
        per_draw.push_back(logprobs(params, tokens, prompt_len, PerturbationDraw{num::derive_seed(base_seed, {k})},
                                    spec, key));
    }
    return log_mean_exp(per_draw);
}

std::vector<double> log_mean_exp(const std::vector<std::vector<double>>& per_draw)
{
    if (per_draw.empty()) {
        throw std::invalid_argument("log_mean_exp over zero draws");
    }
    std::vector<double> out(per_draw[0].size());
    for (std::size_t t = 0; t < out.size(); ++t) {
        double mx = -INFINITY;
        for (const auto& lp : per_draw) {
            mx = std::max(mx, lp.at(t));
        }
        double s = 0.0;
        for (const auto& lp : per_draw) {
            s += std::exp(lp[t] - mx);
        }
        out[t] = mx + std::log(s / static_cast<double>(per_draw.size()));
    }
    return out;
}

int sample_token(std::span<const double> log_probs, double temperature, num::Rng& rng)
{
    if (!(temperature > 0.0)) {
        throw std::invalid_argument("temperature must be positive");
    }
    if (log_probs.empty()) {
        throw std::invalid_argument("empty distribution");
    }
    if (temperature <= 1e-6) {
        return static_cast<int>(std::max_element(log_probs.begin(), log_probs.end()) - log_probs.begin());
    }
    const double mx = *std::max_element(log_probs.begin(), log_probs.end());
    std::vector<double> w(log_probs.size());
    double total = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = std::exp((log_probs[i] - mx) / temperature);
        total += w[i];
    }
    const double u = std::uniform_real_distribution<double>(0.0, total)(rng);
    double acc = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        acc += w[i];
        if (u < acc) {
            return static_cast<int>(i);
        }
    }
    // Round-off can leave u at the very top; fall back to the last positive-weight token.
    for (std::size_t i = w.size(); i-- > 0;) {
        if (w[i] > 0.0) {
            return static_cast<int>(i);
        }
    }
    return 0;
}

std::vector<int> sample(const PolicyParams& params, std::span<const int> prompt, double temperature,
                        std::size_t max_new, num::Rng& rng)
{
    if (max_new == 0) {
        throw std::invalid_argument("max_new must be at least 1");
    }
    if (!(temperature > 0.0)) {
        throw std::invalid_argument("temperature must be positive");
    }
    std::vector<int> seq(prompt.begin(), prompt.end());
    check_tokens(params.config, seq, seq.size());
    for (std::size_t step = 0; step < max_new && seq.size() < static_cast<std::size_t>(params.config.context_len);
         ++step) {
        num::Tape tape(false);
        const BoundParams bound = bind(tape, params);
        SequenceBatch batch{seq.size(), seq, {SequenceKey{}}};
        const std::size_t row = seq.size() - 1;
        Var lsm = forward_log_softmax(bound, batch, std::span<const std::size_t>(&row, 1), ForwardOptions{});
        seq.push_back(sample_token(lsm.value().row(0), temperature, rng));
    }
    return std::vector<int>(seq.begin() + static_cast<std::ptrdiff_t>(prompt.size()), seq.end());
}

} // namespace alp::policy
