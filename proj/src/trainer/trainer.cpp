#include "alp/trainer/trainer.hpp"

#include "alp/numcore/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace alp::trainer {
namespace {

using engines::Response;
using engines::Role;
using policy::PolicyParams;

constexpr std::uint64_t kInitStream = 0x696e6974;
constexpr std::uint64_t kPromptStream = 0x70726f6d;
constexpr std::uint64_t kRolloutStream = 0x726f6c6c;
constexpr std::uint64_t kDrawStream = 0x64656c74;
constexpr std::uint64_t kHeldoutStream = 0x686f6c64;
constexpr std::uint64_t kHeldoutIdBase = 1ULL << 62;

static_assert(std::endian::native == std::endian::little, "state files store little-endian doubles");

std::string fmt(double v)
{
    if (std::isnan(v)) {
        return "nan";
    }
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

double median(std::vector<double> v)
{
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double sum_squares(std::span<const Tensor> ts)
{
    double s = 0.0;
    for (const auto& t : ts) {
        for (double x : t.data()) {
            s += x * x;
        }
    }
    return s;
}

struct SequenceStore {
    std::vector<std::vector<int>> tokens;
    std::vector<engines::SequenceRef> refs;

    explicit SequenceStore(std::span<const Response> responses)
    {
        tokens.reserve(responses.size());
        for (const auto& r : responses) {
            tokens.push_back(r.full_sequence());
        }
        for (std::size_t i = 0; i < responses.size(); ++i) {
            refs.push_back({tokens[i], responses[i].prompt.size(), responses[i].key()});
        }
    }
};

bool numerator_perturbed(const objectives::ObjectiveConfig& objective, const policy::PerturbationSpec& spec,
                         const std::optional<policy::PerturbationDraw>& draw)
{
    return objectives::wiring(objective.method).numerator == engines::EngineTag::train_perturbed && draw &&
           spec.mode != policy::PerturbMode::none;
}

GradientPass run_pass(const PolicyParams& params, std::span<const Response> responses,
                      std::span<const std::vector<double>> lp_old, const objectives::ObjectiveConfig& objective,
                      const policy::PerturbationSpec& spec, const std::optional<policy::PerturbationDraw>& draw,
                      bool want_gradient)
{
    if (lp_old.size() != responses.size()) {
        throw std::invalid_argument("loss_gradient: lp_old has " + std::to_string(lp_old.size()) +
                                    " sequences, responses " + std::to_string(responses.size()));
    }
    const SequenceStore store(responses);
    const auto buckets = engines::bucket_by_length(store.refs);

    num::Tape tape(want_gradient);
    const auto bound = policy::bind(tape, params);
    policy::ForwardOptions options;
    if (numerator_perturbed(objective, spec, draw)) {
        options.perturb = spec;
        options.draw = draw;
    }

    std::vector<objectives::SequenceInputs> inputs(responses.size());
    std::vector<num::Var> outputs;
    for (const auto& b : buckets) {
        const num::Var lsm = policy::forward_log_softmax(bound, b.batch, b.rows, options);
        outputs.push_back(lsm);
        const Tensor& L = lsm.value();
        for (std::size_t m = 0; m < b.members.size(); ++m) {
            const std::size_t i = b.members[m];
            const Response& r = responses[i];
            auto& in = inputs[i];
            for (std::size_t t = 0; t < r.tokens.size(); ++t) {
                const std::size_t row = b.member_offset[m] + t;
                in.lp_num.push_back(L.at(row, static_cast<std::size_t>(r.tokens[t])));
                double h = 0.0;
                for (double l : L.row(row)) {
                    h -= std::exp(l) * l;
                }
                in.entropy.push_back(h);
            }
        }
    }
    for (std::size_t i = 0; i < responses.size(); ++i) {
        const Response& r = responses[i];
        auto& in = inputs[i];
        if (lp_old[i].size() != r.tokens.size() || r.infer_logprobs.size() != r.tokens.size() ||
            r.roles.size() != r.tokens.size()) {
            throw std::invalid_argument("loss_gradient: response " + std::to_string(i) +
                                        " has inconsistent per-token arrays");
        }
        in.lp_old = lp_old[i];
        in.lp_infer = r.infer_logprobs;
        in.valid.resize(r.tokens.size());
        for (std::size_t t = 0; t < r.tokens.size(); ++t) {
            in.valid[t] = r.roles[t] == Role::model;
        }
        in.advantage = r.advantage;
    }

    GradientPass out;
    out.loss = objectives::assemble_loss(objective, inputs);
    for (auto& in : inputs) {
        out.lp_num.push_back(std::move(in.lp_num));
    }
    if (!want_gradient) {
        return out;
    }

    // dH/dl_v = -exp(l_v) (l_v + 1) for H = -sum exp(l) l.
    std::vector<std::pair<num::Var, Tensor>> seeds;
    for (std::size_t k = 0; k < buckets.size(); ++k) {
        const auto& b = buckets[k];
        const Tensor& L = outputs[k].value();
        Tensor g(L.shape());
        for (std::size_t m = 0; m < b.members.size(); ++m) {
            const std::size_t i = b.members[m];
            const Response& r = responses[i];
            for (std::size_t t = 0; t < r.tokens.size(); ++t) {
                const std::size_t row = b.member_offset[m] + t;
                g.at(row, static_cast<std::size_t>(r.tokens[t])) += out.loss.d_lp_num[i][t];
                const double de = out.loss.d_entropy[i][t];
                if (de != 0.0) {
                    auto grow = g.row(row);
                    const auto lrow = L.row(row);
                    for (std::size_t v = 0; v < grow.size(); ++v) {
                        grow[v] += de * -std::exp(lrow[v]) * (lrow[v] + 1.0);
                    }
                }
            }
        }
        seeds.emplace_back(outputs[k], std::move(g));
    }
    tape.backward(seeds);
    for (const auto& w : bound.weights) {
        out.grad_weights.push_back(tape.grad(w));
    }
    out.grad_log_sigma = tape.grad(bound.log_sigma);
    return out;
}

std::vector<double> valid_values(std::span<const std::vector<double>> values, std::span<const Response> responses)
{
    std::vector<double> out;
    for (std::size_t i = 0; i < responses.size(); ++i) {
        for (std::size_t t = 0; t < responses[i].roles.size(); ++t) {
            if (responses[i].roles[t] == Role::model) {
                out.push_back(values[i][t]);
            }
        }
    }
    return out;
}

std::vector<engines::Prompt> heldout_set(const RunSetup& setup)
{
    auto prompts = tasks::gen_prompts(setup.task, setup.trainer.heldout_prompts,
                                      num::derive_seed(setup.trainer.seed, {kHeldoutStream}));
    for (std::size_t p = 0; p < prompts.size(); ++p) {
        prompts[p].id = kHeldoutIdBase + p;
    }
    return prompts;
}

void write_doubles(std::ostream& out, std::span<const Tensor> ts)
{
    for (const auto& t : ts) {
        out.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
}

void read_doubles(std::istream& in, std::vector<Tensor>& ts)
{
    for (auto& t : ts) {
        in.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!in) {
        throw std::runtime_error("optimizer state: truncated moment data");
    }
}

} // namespace

void adamw_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state, double lr,
                double weight_decay, const AdamConfig& config)
{
    if (params.size() != grads.size()) {
        throw std::invalid_argument("adamw_step: " + std::to_string(params.size()) + " parameters, " +
                                    std::to_string(grads.size()) + " gradients");
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (params[k].shape() != grads[k].shape()) {
            throw std::invalid_argument("adamw_step: gradient " + std::to_string(k) + " has the wrong shape");
        }
        if (!grads[k].all_finite()) {
            throw num::NumericError("adamw_step: non-finite gradient in tensor " + std::to_string(k));
        }
    }
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.shape());
            state.v.emplace_back(p.shape());
        }
    } else if (state.m.size() != params.size()) {
        throw std::invalid_argument("adamw_step: optimizer state does not match the parameter list");
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto p = params[k].data();
        auto m = state.m[k].data();
        auto v = state.v[k].data();
        const auto g = grads[k].data();
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (weight_decay != 0.0) {
                p[i] -= lr * weight_decay * p[i];
            }
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.eps);
        }
    }
}

void TrainerConfig::validate() const
{
    auto fail = [](const std::string& msg) { throw std::invalid_argument("trainer config: " + msg); };
    if (prompts_per_iter == 0) {
        fail("prompts_per_iter must be positive");
    }
    if (group_size < 2) {
        fail("group_size must be at least 2");
    }
    if (updates_per_iter < 1) {
        fail("updates_per_iter must be at least 1");
    }
    if (micro_batch == 0 || batch_size() % micro_batch != 0) {
        fail("micro_batch must divide prompts_per_iter * group_size = " + std::to_string(batch_size()));
    }
    if (!(lr_theta >= 0.0) || !(weight_decay >= 0.0)) {
        fail("lr_theta and weight_decay must be >= 0");
    }
    if (!(lr_sigma >= 0.0)) {
        fail("lr_sigma must be >= 0");
    }
    if (!(sigma_init > 0.0) || !std::isfinite(sigma_init)) {
        fail("sigma_init must be positive");
    }
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 && adam.eps > 0.0)) {
        fail("adam betas must lie in [0, 1) and eps must be positive");
    }
    if (!(temperature > 0.0)) {
        fail("temperature must be positive");
    }
    if (rollout_workers == 0) {
        fail("rollout_workers must be positive");
    }
    if (heldout_prompts == 0) {
        fail("heldout_prompts must be positive");
    }
    if (!(divergence_factor > 1.0) || divergence_window == 0 || divergence_min_history == 0 ||
        divergence_min_history > divergence_window) {
        fail("divergence detector needs factor > 1 and 1 <= min_history <= window");
    }
}

void RunSetup::validate() const
{
    task.validate();
    policy.validate();
    trainer.validate();
    objective.validate();
    mismatch.validate();
    perturbation.validate(policy.n_layers);
    envelope.validate();
    if (policy.vocab_size != task.vocab_size) {
        throw std::invalid_argument("policy vocab_size (" + std::to_string(policy.vocab_size) +
                                    ") differs from the task vocabulary (" + std::to_string(task.vocab_size) + ")");
    }
}

bool RunSetup::perturbs() const
{
    return objectives::wiring(objective.method).numerator == engines::EngineTag::train_perturbed &&
           perturbation.mode != policy::PerturbMode::none;
}

RunState RunState::fresh(const RunSetup& setup)
{
    setup.validate();
    RunState s;
    s.params = PolicyParams::init(setup.policy, num::derive_seed(setup.trainer.seed, {kInitStream}),
                                  setup.trainer.sigma_init);
    return s;
}

void save_state(const RunState& state, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    policy::save_checkpoint(state.params, dir / "policy.ckpt");
    {
        std::ofstream out(dir / "optimizer.bin", std::ios::binary);
        out << "ALPOPT 1 " << state.adam_theta.step << ' ' << state.adam_theta.m.size() << ' '
            << state.adam_sigma.step << ' ' << state.adam_sigma.m.size() << '\n';
        write_doubles(out, state.adam_theta.m);
        write_doubles(out, state.adam_theta.v);
        write_doubles(out, state.adam_sigma.m);
        write_doubles(out, state.adam_sigma.v);
        if (!out) {
            throw std::runtime_error("cannot write " + (dir / "optimizer.bin").string());
        }
    }
    nlohmann::json j{{"iter", state.iter}, {"step", state.step}, {"grad_norm_window", state.grad_norm_window}};
    std::ofstream out(dir / "state.json");
    out << j.dump(2) << '\n';
    if (!out) {
        throw std::runtime_error("cannot write " + (dir / "state.json").string());
    }
}

RunState load_state(const RunSetup& setup, const std::filesystem::path& dir)
{
    RunState s;
    s.params = policy::load_checkpoint(dir / "policy.ckpt");
    if (!(s.params.config == setup.policy)) {
        throw std::runtime_error("checkpoint policy config differs from the run config");
    }
    std::ifstream in(dir / "optimizer.bin", std::ios::binary);
    if (!in) {
        throw std::runtime_error("missing " + (dir / "optimizer.bin").string());
    }
    std::string magic;
    int version = 0;
    std::size_t theta_count = 0, sigma_count = 0;
    in >> magic >> version >> s.adam_theta.step >> theta_count >> s.adam_sigma.step >> sigma_count;
    in.get();
    if (magic != "ALPOPT" || version != 1 || (theta_count != 0 && theta_count != s.params.weights.size()) ||
        sigma_count > 1) {
        throw std::runtime_error("unrecognized optimizer state in " + dir.string());
    }
    if (theta_count != 0) {
        for (const auto& w : s.params.weights) {
            s.adam_theta.m.emplace_back(w.shape());
            s.adam_theta.v.emplace_back(w.shape());
        }
    }
    if (sigma_count != 0) {
        s.adam_sigma.m.emplace_back(s.params.perturb_log_sigma.shape());
        s.adam_sigma.v.emplace_back(s.params.perturb_log_sigma.shape());
    }
    read_doubles(in, s.adam_theta.m);
    read_doubles(in, s.adam_theta.v);
    read_doubles(in, s.adam_sigma.m);
    read_doubles(in, s.adam_sigma.v);

    std::ifstream js(dir / "state.json");
    if (!js) {
        throw std::runtime_error("missing " + (dir / "state.json").string());
    }
    const auto j = nlohmann::json::parse(js);
    s.iter = j.at("iter").get<std::uint64_t>();
    s.step = j.at("step").get<std::uint64_t>();
    s.grad_norm_window = j.at("grad_norm_window").get<std::vector<double>>();
    return s;
}

std::vector<std::string> metrics_columns(const RunSetup& setup)
{
    std::vector<std::string> c{"iter",           "update",           "step",       "reward_mean",
                               "loss",           "surrogate",        "grad_norm",  "sigma_grad_norm",
                               "entropy",        "kl_train_infer",   "kl_policy_update", "kl_heldout",
                               "clip_frac",      "mis_masked_frac"};
    for (double l : setup.envelope.levels) {
        c.push_back("log_ratio_q" + fmt(l));
    }
    for (const char* name : {"abs_log_ratio_p99", "dp_mean", "dp_p75", "dp_p99"}) {
        c.emplace_back(name);
    }
    for (int h = 0; h < setup.policy.n_layers; ++h) {
        c.push_back("sigma_l" + std::to_string(h));
    }
    c.emplace_back("sigma_logits");
    return c;
}

void write_metrics_header(const RunSetup& setup, std::ostream& out)
{
    const auto cols = metrics_columns(setup);
    for (std::size_t i = 0; i < cols.size(); ++i) {
        out << (i ? "," : "") << cols[i];
    }
    out << '\n';
}

void write_metrics_row(const UpdateMetrics& r, std::ostream& out)
{
    out << r.iter << ',' << r.update << ',' << r.step;
    for (double v : {r.reward_mean, r.loss, r.surrogate, r.grad_norm, r.sigma_grad_norm, r.entropy, r.kl_train_infer,
                     r.kl_policy_update, r.kl_heldout, r.clip_frac, r.mis_masked_frac}) {
        out << ',' << fmt(v);
    }
    for (double v : r.log_ratio_quantiles) {
        out << ',' << fmt(v);
    }
    for (double v : {r.abs_log_ratio_p99, r.dp.mean, r.dp.p75, r.dp.p99}) {
        out << ',' << fmt(v);
    }
    for (double v : r.sigma) {
        out << ',' << fmt(v);
    }
    out << '\n';
}

std::vector<std::vector<double>> train_logprobs(const PolicyParams& params, std::span<const Response> responses)
{
    const SequenceStore store(responses);
    auto lps = engines::evaluate(params, store.refs, engines::EvalRequest{});
    std::vector<std::vector<double>> out;
    out.reserve(lps.size());
    for (auto& l : lps) {
        out.push_back(std::move(l.values));
    }
    return out;
}

GradientPass loss_gradient(const PolicyParams& params, std::span<const Response> responses,
                           std::span<const std::vector<double>> lp_old, const objectives::ObjectiveConfig& objective,
                           const policy::PerturbationSpec& spec, const std::optional<policy::PerturbationDraw>& draw)
{
    return run_pass(params, responses, lp_old, objective, spec, draw, true);
}

double loss_value(const PolicyParams& params, std::span<const Response> responses,
                  std::span<const std::vector<double>> lp_old, const objectives::ObjectiveConfig& objective,
                  const policy::PerturbationSpec& spec, const std::optional<policy::PerturbationDraw>& draw)
{
    return run_pass(params, responses, lp_old, objective, spec, draw, false).loss.loss;
}

std::uint64_t prompt_seed(const RunSetup& setup, std::uint64_t iter)
{
    return num::derive_seed(setup.trainer.seed, {kPromptStream, iter});
}

std::uint64_t rollout_seed(const RunSetup& setup, std::uint64_t iter)
{
    return num::derive_seed(setup.trainer.seed, {kRolloutStream, iter});
}

std::uint64_t draw_seed(const RunSetup& setup, std::uint64_t iter, std::uint64_t update)
{
    return num::derive_seed(setup.trainer.seed, {kDrawStream, iter, update});
}

std::vector<engines::Prompt> iteration_prompts(const RunSetup& setup, std::uint64_t iter)
{
    auto prompts = tasks::gen_prompts(setup.task, setup.trainer.prompts_per_iter, prompt_seed(setup, iter));
    for (std::size_t p = 0; p < prompts.size(); ++p) {
        prompts[p].id = iter * setup.trainer.prompts_per_iter + p;
    }
    return prompts;
}

engines::RolloutBatch collect(const RunSetup& setup, const PolicyParams& params_old, std::uint64_t iter)
{
    const auto prompts = iteration_prompts(setup, iter);
    engines::RolloutConfig rc;
    rc.group_size = setup.trainer.group_size;
    rc.temperature = setup.trainer.temperature;
    rc.max_new = setup.task.response_budget();
    rc.workers = setup.trainer.rollout_workers;
    rc.seed = rollout_seed(setup, iter);
    const tasks::TaskEnvironment env(setup.task);
    auto batch = engines::rollout(params_old, setup.mismatch, prompts, rc, env);
    tasks::score_batch(setup.task, batch);
    std::vector<double> rewards;
    for (const auto& r : batch.responses) {
        rewards.push_back(r.reward);
    }
    const auto adv = objectives::group_advantage(rewards, batch.group_size);
    for (std::size_t i = 0; i < adv.size(); ++i) {
        batch.responses[i].advantage = adv[i];
    }
    return batch;
}

double heldout_kl(const PolicyParams& old_params, const PolicyParams& new_params,
                  std::span<const engines::Prompt> prompts)
{
    if (prompts.empty()) {
        return 0.0;
    }
    std::map<std::size_t, policy::SequenceBatch> by_len;
    for (const auto& p : prompts) {
        auto& b = by_len[p.tokens.size()];
        b.length = p.tokens.size();
        b.tokens.insert(b.tokens.end(), p.tokens.begin(), p.tokens.end());
        b.keys.push_back({p.id, 0});
    }
    double total = 0.0;
    for (const auto& [len, b] : by_len) {
        std::vector<std::size_t> rows;
        for (std::size_t s = 0; s < b.batch(); ++s) {
            rows.push_back(s * len + len - 1);
        }
        num::Tape t_old(false), t_new(false);
        const auto lo = policy::forward_log_softmax(policy::bind(t_old, old_params), b, rows, {});
        const auto ln = policy::forward_log_softmax(policy::bind(t_new, new_params), b, rows, {});
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const auto a = lo.value().row(r);
            const auto c = ln.value().row(r);
            double kl = 0.0;
            for (std::size_t v = 0; v < a.size(); ++v) {
                kl += std::exp(a[v]) * (a[v] - c[v]);
            }
            total += kl;
        }
    }
    return total / static_cast<double>(prompts.size());
}

IterationResult update_on_batch(RunState& state, const RunSetup& setup, engines::RolloutBatch batch,
                                std::size_t n_updates)
{
    const TrainerConfig& tc = setup.trainer;
    const auto& rs = batch.responses;
    if (rs.size() != tc.batch_size()) {
        throw std::invalid_argument("update_on_batch: batch has " + std::to_string(rs.size()) +
                                    " responses, expected " + std::to_string(tc.batch_size()));
    }
    IterationResult res;
    const PolicyParams params_old = state.params;
    const auto lp_old = train_logprobs(params_old, rs);
    const auto heldout = heldout_set(setup);

    std::vector<std::vector<double>> lp_infer;
    double reward_sum = 0.0;
    for (const auto& r : rs) {
        lp_infer.push_back(r.infer_logprobs);
        reward_sum += r.reward;
    }
    const double reward_mean = reward_sum / static_cast<double>(rs.size());
    const double kl_train_infer = diagnostics::kl_estimate(valid_values(lp_infer, rs), valid_values(lp_old, rs),
                                                           diagnostics::KlEstimator::k1);
    for (std::size_t g = 0; g < batch.group_count(); ++g) {
        std::size_t c = 0;
        for (std::size_t j = 0; j < batch.group_size; ++j) {
            c += rs[g * batch.group_size + j].reward >= 1.0;
        }
        res.correct_per_prompt.push_back(c);
    }

    const std::size_t mb = tc.micro_batch, n_mb = rs.size() / mb;
    const bool perturbs = setup.perturbs();
    for (std::size_t u = 0; u < n_updates; ++u) {
        const std::size_t offset = (u % n_mb) * mb;
        const std::span<const Response> mres(rs.data() + offset, mb);
        const std::span<const std::vector<double>> mold(lp_old.data() + offset, mb);
        std::optional<policy::PerturbationDraw> draw;
        if (perturbs) {
            draw = policy::PerturbationDraw{draw_seed(setup, state.iter, u)};
        }
        GradientPass g = loss_gradient(state.params, mres, mold, setup.objective, setup.perturbation, draw);

        UpdateMetrics row;
        row.iter = state.iter;
        row.update = u;
        row.step = state.step;
        row.reward_mean = reward_mean;
        row.loss = g.loss.loss;
        row.surrogate = g.loss.surrogate;
        row.grad_norm = std::sqrt(sum_squares(g.grad_weights));
        row.sigma_grad_norm = perturbs ? std::sqrt(sum_squares(std::span(&g.grad_log_sigma, 1))) : 0.0;
        row.entropy = g.loss.entropy;
        row.kl_train_infer = kl_train_infer;
        row.clip_frac = g.loss.clip_frac;
        row.mis_masked_frac = g.loss.mis_masked_frac;

        std::vector<double> log_ratios;
        for (std::size_t i = 0; i < mres.size(); ++i) {
            for (std::size_t t = 0; t < mres[i].roles.size(); ++t) {
                if (mres[i].roles[t] == Role::model) {
                    log_ratios.push_back(g.loss.ratios.token_log[i][t]);
                    res.envelope_log_ratios.push_back(g.loss.ratios.token_log[i][t]);
                    res.envelope_rollout_probs.push_back(std::exp(mres[i].infer_logprobs[t]));
                }
            }
        }
        if (!log_ratios.empty()) {
            row.log_ratio_quantiles = diagnostics::quantiles(log_ratios, setup.envelope.levels);
            for (double& v : log_ratios) {
                v = std::abs(v);
            }
            row.abs_log_ratio_p99 = diagnostics::quantile(log_ratios, 99.0);
        } else {
            row.log_ratio_quantiles.assign(setup.envelope.levels.size(), 0.0);
        }
        const auto lp_clean = perturbs ? train_logprobs(state.params, mres) : g.lp_num;
        const auto clean_valid = valid_values(lp_clean, mres);
        row.kl_policy_update = diagnostics::kl_estimate(valid_values(mold, mres), clean_valid,
                                                        diagnostics::KlEstimator::k3);
        row.dp = diagnostics::perturb_shift_stats(valid_values(g.lp_num, mres), clean_valid);
        for (double ls : state.params.perturb_log_sigma.data()) {
            row.sigma.push_back(std::exp(ls));
        }

        std::optional<DivergenceRecord> div;
        if (!std::isfinite(row.loss) || !std::isfinite(row.grad_norm) || !std::isfinite(row.sigma_grad_norm)) {
            div = DivergenceRecord{state.iter, u, "non-finite loss or gradient", row.grad_norm, 0.0};
        } else if (state.grad_norm_window.size() >= tc.divergence_min_history) {
            const double med = median(state.grad_norm_window);
            if (row.grad_norm > tc.divergence_factor * med) {
                div = DivergenceRecord{state.iter, u, "gradient norm spike", row.grad_norm, med};
            }
        }
        if (div) {
            row.kl_heldout = std::nan("");
            res.updates.push_back(std::move(row));
            res.divergence = std::move(div);
            break;
        }
        state.grad_norm_window.push_back(row.grad_norm);
        if (state.grad_norm_window.size() > tc.divergence_window) {
            state.grad_norm_window.erase(state.grad_norm_window.begin());
        }

        adamw_step(state.params.weights, g.grad_weights, state.adam_theta, tc.lr_theta, tc.weight_decay, tc.adam);
        if (perturbs && tc.lr_sigma > 0.0) {
            adamw_step(std::span(&state.params.perturb_log_sigma, 1), std::span(&g.grad_log_sigma, 1),
                       state.adam_sigma, tc.lr_sigma, 0.0, tc.adam);
        }
        ++state.params.version;
        ++state.step;
        // Held-out KL is measured once per iteration, after its last update.
        row.kl_heldout = u + 1 == n_updates ? heldout_kl(params_old, state.params, heldout) : std::nan("");
        res.updates.push_back(std::move(row));
    }
    res.batch = std::move(batch);
    return res;
}

IterationResult run_iteration(RunState& state, const RunSetup& setup)
{
    auto batch = collect(setup, state.params, state.iter);
    auto res = update_on_batch(state, setup, std::move(batch), setup.trainer.updates_per_iter);
    if (!res.divergence) {
        ++state.iter;
    }
    return res;
}

} // namespace alp::trainer
