#include "alp/policy/policy.hpp"
#include "test_support.hpp"

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>

using namespace alp;
using namespace alp::policy;

namespace {

PolicyConfig small_config(int layers = 2, int d = 8)
{
    PolicyConfig c;
    c.vocab_size = 12;
    c.context_len = 10;
    c.n_layers = layers;
    c.d_model = d;
    c.n_heads = 2;
    return c;
}

const std::vector<int> kTokens{0, 5, 7, 3, 9, 11, 2};

// Plain-loop transformer forward that materializes each injected hidden state
// x + sigma * delta explicitly. Returns log pi(tokens[t] | tokens[<t]) for t >= 1.
std::vector<double> oracle_logprobs(const PolicyParams& p, const std::vector<int>& tok, const PerturbationSpec& spec,
                                    const std::optional<PerturbationDraw>& draw)
{
    const auto& c = p.config;
    const std::size_t T = tok.size(), d = c.d_model, V = c.vocab_size, H = c.n_heads, hd = d / H;
    using Mat = std::vector<std::vector<double>>;
    auto W = [&](const std::string& n) { return p.weight(n); };
    auto lnorm = [&](const std::vector<double>& x, const Tensor& g, const Tensor& b) {
        double mu = 0, var = 0;
        for (double v : x) mu += v;
        mu /= x.size();
        for (double v : x) var += (v - mu) * (v - mu);
        var /= x.size();
        std::vector<double> y(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mu) / std::sqrt(var + c.ln_eps) * g[i] + b[i];
        return y;
    };
    auto affine = [](const std::vector<double>& x, const Tensor& w, const Tensor* b) {
        const std::size_t n = w.dim(1);
        std::vector<double> y(n, 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t i = 0; i < x.size(); ++i) y[j] += x[i] * w.at(i, j);
            if (b) y[j] += (*b)[j];
        }
        return y;
    };
    Mat x(T, std::vector<double>(d));
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < d; ++j) x[t][j] = W("wte").at(tok[t], j) + W("wpe").at(t, j);
    for (int h = 0; h < c.n_layers; ++h) {
        const std::string pre = "h" + std::to_string(h) + ".";
        if (draw && spec.includes(h, c.n_layers)) {
            const double s = std::exp(p.perturb_log_sigma[h]);
            for (std::size_t t = 0; t < T; ++t) {
                const auto delta = draw->values({}, h, t, d);
                for (std::size_t j = 0; j < d; ++j) x[t][j] = x[t][j] + s * delta[j];
            }
        }
        Mat qkv(T);
        for (std::size_t t = 0; t < T; ++t) {
            const Tensor b = W(pre + "qkv_b");
            qkv[t] = affine(lnorm(x[t], W(pre + "ln1_g"), W(pre + "ln1_b")), W(pre + "qkv"), &b);
        }
        Mat att(T, std::vector<double>(d, 0.0));
        for (std::size_t hh = 0; hh < H; ++hh) {
            for (std::size_t t = 0; t < T; ++t) {
                std::vector<double> sc(t + 1);
                double mx = -1e300, z = 0;
                for (std::size_t k = 0; k <= t; ++k) {
                    double s = 0;
                    for (std::size_t j = 0; j < hd; ++j) s += qkv[t][hh * hd + j] * qkv[k][d + hh * hd + j];
                    sc[k] = s / std::sqrt(double(hd));
                    mx = std::max(mx, sc[k]);
                }
                for (auto& s : sc) z += (s = std::exp(s - mx));
                for (std::size_t k = 0; k <= t; ++k)
                    for (std::size_t j = 0; j < hd; ++j) att[t][hh * hd + j] += sc[k] / z * qkv[k][2 * d + hh * hd + j];
            }
        }
        for (std::size_t t = 0; t < T; ++t) {
            const Tensor bo = W(pre + "attn_out_b"), b1 = W(pre + "mlp_in_b"), b2 = W(pre + "mlp_out_b");
            const auto o = affine(att[t], W(pre + "attn_out"), &bo);
            for (std::size_t j = 0; j < d; ++j) x[t][j] += o[j];
            auto m = affine(lnorm(x[t], W(pre + "ln2_g"), W(pre + "ln2_b")), W(pre + "mlp_in"), &b1);
            for (auto& v : m) v = 0.5 * v * (1 + std::tanh(std::sqrt(2 / std::numbers::pi) * (v + 0.044715 * v * v * v)));
            const auto y = affine(m, W(pre + "mlp_out"), &b2);
            for (std::size_t j = 0; j < d; ++j) x[t][j] += y[j];
        }
    }
    std::vector<double> out;
    for (std::size_t t = 1; t < T; ++t) {
        auto logits = affine(lnorm(x[t - 1], W("lnf_g"), W("lnf_b")), W("lm_head"), nullptr);
        if (draw && spec.includes(c.n_layers, c.n_layers)) {
            const double s = std::exp(p.perturb_log_sigma[c.n_layers]);
            const auto delta = draw->values({}, c.n_layers, t - 1, V);
            for (std::size_t j = 0; j < V; ++j) logits[j] += s * delta[j];
        }
        double mx = -1e300, z = 0;
        for (double v : logits) mx = std::max(mx, v);
        for (double v : logits) z += std::exp(v - mx);
        out.push_back(logits[tok[t]] - mx - std::log(z));
    }
    return out;
}

std::vector<Tensor> full_rows(const PolicyParams& p, const std::vector<int>& tok, const ForwardOptions& opt,
                              Tensor* lsm_out = nullptr)
{
    num::Tape tape(false);
    auto bound = bind(tape, p);
    SequenceBatch b{tok.size(), tok, {SequenceKey{}}};
    std::vector<std::size_t> rows(tok.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    std::vector<Tensor> hidden;
    ForwardOptions o = opt;
    o.capture_hidden = &hidden;
    auto v = forward_log_softmax(bound, b, rows, o);
    if (lsm_out) *lsm_out = v.value();
    return hidden;
}

} // namespace

TEST(Policy, ConfigValidation)
{
    PolicyConfig c = small_config();
    c.n_heads = 3;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = small_config();
    c.context_len = 1;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = small_config();
    c.vocab_size = 3;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    EXPECT_THROW(PerturbationSpec::layer_band(1, 2).validate(2), std::invalid_argument);
    EXPECT_THROW(PerturbationSpec::layer_band(1, 0).validate(2), std::invalid_argument);
    EXPECT_EQ(PerturbationSpec::layer_band(1, 1).targets(3), std::vector<int>{1});
    EXPECT_EQ(PerturbationSpec::all_layers().targets(2), (std::vector<int>{0, 1}));
    EXPECT_EQ(PerturbationSpec::logits_only().targets(2), std::vector<int>{2});
    EXPECT_TRUE(PerturbationSpec::none().targets(2).empty());
}

TEST(Policy, NoneModeIgnoresDraw)
{
    const auto p = PolicyParams::init(small_config(), 3, 0.1);
    const auto base = logprobs(p, kTokens, 1, std::nullopt, PerturbationSpec::none());
    const auto with_draw = logprobs(p, kTokens, 1, PerturbationDraw{42}, PerturbationSpec::none());
    EXPECT_EQ(base, with_draw);
}

TEST(Policy, ZeroSigmaIsBitwiseUnperturbed)
{
    auto p = PolicyParams::init(small_config(), 3, 0.1);
    const auto base = logprobs(p, kTokens, 1, std::nullopt, PerturbationSpec::none());
    for (double& v : p.perturb_log_sigma.data()) v = -std::numeric_limits<double>::infinity();
    for (std::uint64_t seed : {1u, 2u, 99u}) {
        EXPECT_EQ(logprobs(p, kTokens, 1, PerturbationDraw{seed}, PerturbationSpec::all_layers()), base);
        EXPECT_EQ(logprobs(p, kTokens, 1, PerturbationDraw{seed}, PerturbationSpec::logits_only()), base);
    }
}

TEST(Policy, PerturbedLogprobsMatchExplicitShiftOracle)
{
    const auto p = PolicyParams::init(small_config(2, 8), 5, 0.1);
    for (auto spec : {PerturbationSpec::none(), PerturbationSpec::all_layers(), PerturbationSpec::layer_band(1, 1),
                      PerturbationSpec::logits_only()}) {
        const PerturbationDraw draw{1234};
        const auto got = logprobs(p, kTokens, 1, draw, spec);
        const auto want = oracle_logprobs(p, kTokens, spec, draw);
        ASSERT_EQ(got.size(), want.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
            EXPECT_NEAR(got[i], want[i], 1e-12) << to_string(spec.mode) << " position " << i;
        }
    }
    // The shift is actually visible at this scale.
    EXPECT_NE(logprobs(p, kTokens, 1, PerturbationDraw{1234}, PerturbationSpec::all_layers()),
              logprobs(p, kTokens, 1, std::nullopt, PerturbationSpec::none()));
}

TEST(Policy, DistributionsNormaliseWithAndWithoutPerturbation)
{
    const auto p = PolicyParams::init(small_config(), 8, 0.3);
    for (auto spec : {PerturbationSpec::none(), PerturbationSpec::all_layers(), PerturbationSpec::logits_only()}) {
        ForwardOptions o;
        o.perturb = spec;
        o.draw = PerturbationDraw{7};
        Tensor lsm;
        full_rows(p, kTokens, o, &lsm);
        for (std::size_t r = 0; r < lsm.rows(); ++r) {
            double s = 0;
            for (double v : lsm.row(r)) s += std::exp(v);
            EXPECT_NEAR(s, 1.0, 1e-10);
        }
    }
}

TEST(Policy, ForwardDoesNotMutateParameters)
{
    const auto p = PolicyParams::init(small_config(), 8, 0.3);
    const auto copy = p;
    ForwardOptions o;
    o.perturb = PerturbationSpec::all_layers();
    o.draw = PerturbationDraw{5};
    full_rows(p, kTokens, o);
    for (std::size_t i = 0; i < p.weights.size(); ++i) EXPECT_TRUE(p.weights[i].identical(copy.weights[i]));
    EXPECT_TRUE(p.perturb_log_sigma.identical(copy.perturb_log_sigma));
}

TEST(Policy, LogitsOnlyLeavesHiddenStatesUntouched)
{
    const auto p = PolicyParams::init(small_config(), 8, 0.3);
    ForwardOptions plain, logits;
    logits.perturb = PerturbationSpec::logits_only();
    logits.draw = PerturbationDraw{11};
    Tensor a, b;
    const auto ha = full_rows(p, kTokens, plain, &a);
    const auto hb = full_rows(p, kTokens, logits, &b);
    ASSERT_EQ(ha.size(), hb.size());
    for (std::size_t i = 0; i < ha.size(); ++i) EXPECT_TRUE(ha[i].identical(hb[i]));
    EXPECT_FALSE(a.identical(b));
}

TEST(PolicyProperty, BandRunIsAllLayersDrawRestrictedToBand)
{
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto cfg = small_config(3, 8);
        const auto p = PolicyParams::init(cfg, seed, 0.2);
        const int lo = static_cast<int>(seed % 3), hi = std::min(2, lo + static_cast<int>(seed % 2));
        ForwardOptions band;
        band.perturb = PerturbationSpec::layer_band(lo, hi);
        band.draw = PerturbationDraw{seed + 100};
        // Silence every non-band target of an all-layers run sharing the draw seed.
        auto masked = p;
        for (int t = 0; t <= cfg.n_layers; ++t)
            if (t < lo || t > hi) masked.perturb_log_sigma[t] = -std::numeric_limits<double>::infinity();
        ForwardOptions all = band;
        all.perturb = PerturbationSpec::all_layers();
        Tensor a, b;
        const auto ha = full_rows(p, kTokens, band, &a);
        const auto hb = full_rows(masked, kTokens, all, &b);
        EXPECT_TRUE(a.identical(b));
        for (std::size_t i = 0; i < ha.size(); ++i) EXPECT_TRUE(ha[i].identical(hb[i]));
    }
}

TEST(PolicyProperty, PrefixRowsAreBitIdenticalToFullSequenceRows)
{
    const auto p = PolicyParams::init(small_config(), 2, 0.2);
    ForwardOptions o;
    o.engine.zeta_std = 0.05;
    o.engine.zeta_seed = 9;
    Tensor full;
    full_rows(p, kTokens, o, &full);
    for (std::size_t len = 1; len <= kTokens.size(); ++len) {
        Tensor part;
        full_rows(p, std::vector<int>(kTokens.begin(), kTokens.begin() + len), o, &part);
        for (std::size_t r = 0; r < len; ++r)
            for (std::size_t j = 0; j < part.cols(); ++j) ASSERT_EQ(part.at(r, j), full.at(r, j));
    }
}

TEST(Policy, RejectsBadInput)
{
    const auto p = PolicyParams::init(small_config(), 2, 0.2);
    const std::vector<int> oov{0, 12};
    EXPECT_THROW(logprobs(p, oov, 1, std::nullopt, PerturbationSpec::none()), num::ShapeError);
    const std::vector<int> too_long(11, 1);
    EXPECT_THROW(logprobs(p, too_long, 1, std::nullopt, PerturbationSpec::none()), num::ShapeError);
    EXPECT_THROW(logprobs_smoothed(p, kTokens, 1, PerturbationSpec::all_layers(), 0, 1), std::invalid_argument);
    num::Rng rng(1);
    EXPECT_THROW(sample(p, kTokens, 1.0, 0, rng), std::invalid_argument);
    EXPECT_THROW(sample(p, kTokens, 0.0, 2, rng), std::invalid_argument);
}

TEST(Policy, SmoothedDegenerateCases)
{
    auto p = PolicyParams::init(small_config(), 4, 0.2);
    const auto spec = PerturbationSpec::all_layers();
    EXPECT_EQ(logprobs_smoothed(p, kTokens, 1, spec, 1, 77), logprobs(p, kTokens, 1, PerturbationDraw{77}, spec));
    for (double& v : p.perturb_log_sigma.data()) v = -std::numeric_limits<double>::infinity();
    const auto base = logprobs(p, kTokens, 1, std::nullopt, PerturbationSpec::none());
    const auto smooth = logprobs_smoothed(p, kTokens, 1, spec, 5, 77);
    for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(smooth[i], base[i], 1e-15);
}

TEST(Policy, SmoothedSoftmaxLinearMatchesGaussHermite)
{
    // pi(a | x) = softmax(w * (x + delta) + b), delta ~ N(0, sigma^2), scalar x.
    const std::vector<double> w{1.5, -0.7, 0.3}, b{0.1, 0.4, -0.2};
    const double x = 0.4, sigma = 0.5;
    auto probs = [&](double z) {
        std::vector<double> l(3);
        double mx = -1e300, s = 0;
        for (int i = 0; i < 3; ++i) mx = std::max(mx, l[i] = w[i] * z + b[i]);
        for (auto& v : l) s += (v = std::exp(v - mx));
        for (auto& v : l) v /= s;
        return l;
    };
    // Golub-Welsch nodes for the probabilists' weight exp(-t^2/2).
    const int n = 40;
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
    for (int i = 1; i < n; ++i) J(i, i - 1) = J(i - 1, i) = std::sqrt(double(i));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
    std::vector<double> exact(3, 0.0);
    for (int i = 0; i < n; ++i) {
        const double wt = es.eigenvectors()(0, i) * es.eigenvectors()(0, i);
        const auto pr = probs(x + sigma * es.eigenvalues()(i));
        for (int a = 0; a < 3; ++a) exact[a] += wt * pr[a];
    }
    const std::size_t draws = 100000;
    num::GaussianStream g(2024);
    std::vector<std::vector<double>> per_draw;
    std::vector<double> mean(3, 0.0), sq(3, 0.0);
    for (std::size_t k = 0; k < draws; ++k) {
        const auto pr = probs(x + sigma * g());
        per_draw.push_back({std::log(pr[0]), std::log(pr[1]), std::log(pr[2])});
        for (int a = 0; a < 3; ++a) {
            mean[a] += pr[a] / draws;
            sq[a] += pr[a] * pr[a] / draws;
        }
    }
    const auto smooth = log_mean_exp(per_draw);
    for (int a = 0; a < 3; ++a) {
        const double se = std::sqrt((sq[a] - mean[a] * mean[a]) / draws);
        EXPECT_LT(std::abs(std::exp(smooth[a]) - exact[a]), 3.0 * se) << "action " << a;
    }
}

TEST(Policy, GreedySamplingIsDeterministic)
{
    const auto p = PolicyParams::init(small_config(), 4, 0.2);
    const std::vector<int> prompt{0, 5};
    num::Rng r1(1), r2(2);
    EXPECT_EQ(sample(p, prompt, 1e-9, 5, r1), sample(p, prompt, 1e-9, 5, r2));
}

TEST(Policy, SaturatedLogitAlwaysWins)
{
    const std::vector<double> lp{-31.0, 0.0, -35.0, -40.0};
    num::Rng rng(3);
    for (int i = 0; i < 10000; ++i) ASSERT_EQ(sample_token(lp, 1.0, rng), 1);
}

TEST(Policy, UniformSamplingFrequencies)
{
    const std::vector<double> lp(4, std::log(0.25));
    num::Rng rng(4);
    const int draws = 100000;
    std::vector<int> counts(4, 0);
    for (int i = 0; i < draws; ++i) ++counts[sample_token(lp, 1.0, rng)];
    const double sd = std::sqrt(0.25 * 0.75 / draws);
    for (int c : counts) EXPECT_LT(std::abs(c / double(draws) - 0.25), 3.0 * sd);
}

TEST(Policy, TransformerGradientMatchesFiniteDifferences)
{
    auto p = PolicyParams::init(small_config(2, 8), 6, 0.1);
    const std::vector<int> tok{0, 3, 8, 1, 4, 10};
    const std::vector<std::size_t> rows{0, 1, 2, 3, 4};
    const PerturbationDraw draw{31};
    auto loss = [&](const PolicyParams& q, Tensor* g_flat) {
        num::Tape tape(g_flat != nullptr);
        auto bound = bind(tape, q);
        SequenceBatch b{tok.size(), tok, {SequenceKey{}}};
        ForwardOptions o;
        o.perturb = PerturbationSpec::all_layers();
        o.draw = draw;
        auto lsm = forward_log_softmax(bound, b, rows, o);
        Tensor wts(lsm.shape());
        for (std::size_t r = 0; r < rows.size(); ++r) wts.at(r, tok[r + 1]) = 1.0 + 0.1 * r;
        auto out = num::weighted_sum(lsm, wts);
        if (g_flat) {
            tape.backward(out, Tensor::scalar(1.0));
            std::vector<double> flat;
            for (auto& w : bound.weights) {
                const Tensor g = tape.grad(w);
                flat.insert(flat.end(), g.data().begin(), g.data().end());
            }
            const Tensor gs = tape.grad(bound.log_sigma);
            flat.insert(flat.end(), gs.data().begin(), gs.data().end());
            *g_flat = Tensor({flat.size()}, flat);
        }
        return out.value().item();
    };
    Tensor grad;
    loss(p, &grad);
    // Coordinates address the flat weight list followed by the log-scales.
    std::vector<double*> coords;
    for (auto& w : p.weights) for (double& v : w.data()) coords.push_back(&v);
    for (double& v : p.perturb_log_sigma.data()) coords.push_back(&v);
    num::Rng rng(99);
    const double h = 1e-5;
    double worst = 0;
    for (int k = 0; k < 64; ++k) {
        const std::size_t i = rng() % coords.size();
        const double keep = *coords[i];
        *coords[i] = keep + h;
        const double fp = loss(p, nullptr);
        *coords[i] = keep - h;
        const double fm = loss(p, nullptr);
        *coords[i] = keep;
        worst = std::max(worst, test::rel_err(grad[i], (fp - fm) / (2 * h)));
    }
    EXPECT_LT(worst, 1e-5);
}

TEST(Policy, CheckpointRoundTripIsByteExact)
{
    auto p = PolicyParams::init(small_config(), 4, 0.02);
    p.version = 17;
    const auto dir = std::filesystem::temp_directory_path() / "alp_policy_ckpt";
    std::filesystem::create_directories(dir);
    save_checkpoint(p, dir / "a.ckpt");
    const auto q = load_checkpoint(dir / "a.ckpt");
    save_checkpoint(q, dir / "b.ckpt");
    auto slurp = [](const std::filesystem::path& f) {
        std::ifstream in(f, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    };
    EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
    EXPECT_EQ(q.version, 17u);
    EXPECT_EQ(q.config, p.config);
    for (std::size_t i = 0; i < p.weights.size(); ++i) EXPECT_TRUE(q.weights[i].identical(p.weights[i]));
    EXPECT_TRUE(q.perturb_log_sigma.identical(p.perturb_log_sigma));
    std::ofstream(dir / "bad.ckpt") << "ALPCKPT 2\n";
    EXPECT_THROW(load_checkpoint(dir / "bad.ckpt"), std::runtime_error);
    std::filesystem::remove_all(dir);
}
