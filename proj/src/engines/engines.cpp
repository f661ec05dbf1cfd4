#include "alp/engines/engines.hpp"

#include "alp/numcore/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace alp::engines {

std::string to_string(EngineTag tag)
{
    switch (tag) {
    case EngineTag::train:
        return "train";
    case EngineTag::infer:
        return "infer";
    case EngineTag::train_perturbed:
        return "train_perturbed";
    }
    return "?";
}

void MismatchModel::validate() const
{
    if (!(zeta_std >= 0.0) || !std::isfinite(zeta_std)) {
        throw std::invalid_argument("zeta_std must be a finite value >= 0");
    }
    if (round_bits && (*round_bits < 4 || *round_bits > 52)) {
        throw std::invalid_argument("round_bits must lie in [4, 52], got " + std::to_string(*round_bits));
    }
}

policy::EngineNoise MismatchModel::noise() const
{
    return {zeta_std, seed_stream, round_bits};
}

std::vector<int> Response::full_sequence() const
{
    std::vector<int> s = prompt;
    s.insert(s.end(), tokens.begin(), tokens.end());
    return s;
}

std::vector<LengthBucket> bucket_by_length(std::span<const SequenceRef> seqs)
{
    std::map<std::size_t, LengthBucket> by_len;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        const auto& s = seqs[i];
        if (s.prompt_len == 0 || s.prompt_len > s.tokens.size()) {
            throw std::invalid_argument("sequence " + std::to_string(i) + ": prompt length outside 1..|tokens|");
        }
        LengthBucket& b = by_len[s.tokens.size()];
        const std::size_t slot = b.batch.batch();
        b.batch.length = s.tokens.size();
        b.batch.tokens.insert(b.batch.tokens.end(), s.tokens.begin(), s.tokens.end());
        b.batch.keys.push_back(s.key);
        b.members.push_back(i);
        b.member_offset.push_back(b.rows.size());
        for (std::size_t t = s.prompt_len; t < s.tokens.size(); ++t) {
            b.rows.push_back(slot * s.tokens.size() + t - 1);
        }
    }
    std::vector<LengthBucket> out;
    for (auto& [len, b] : by_len) {
        if (!b.rows.empty()) {
            out.push_back(std::move(b));
        }
    }
    return out;
}

std::vector<TokenLogProbs> evaluate(const PolicyParams& params, std::span<const SequenceRef> seqs,
                                    const EvalRequest& request)
{
    std::vector<TokenLogProbs> out(seqs.size());
    for (auto& r : out) {
        r.tag = request.tag;
        r.params_version = params.version;
    }
    for (const LengthBucket& b : bucket_by_length(seqs)) {
        num::Tape tape(false);
        const auto bound = policy::bind(tape, params);
        const num::Var lsm = policy::forward_log_softmax(bound, b.batch, b.rows, request.options);
        for (std::size_t m = 0; m < b.members.size(); ++m) {
            const SequenceRef& s = seqs[b.members[m]];
            auto& values = out[b.members[m]].values;
            for (std::size_t t = s.prompt_len; t < s.tokens.size(); ++t) {
                const std::size_t row = b.member_offset[m] + (t - s.prompt_len);
                values.push_back(lsm.value().at(row, static_cast<std::size_t>(s.tokens[t])));
            }
        }
    }
    return out;
}

TokenLogProbs eval_train(const PolicyParams& params, std::span<const int> tokens, std::size_t prompt_len)
{
    const SequenceRef s{tokens, prompt_len, {}};
    return evaluate(params, std::span(&s, 1), EvalRequest{})[0];
}

TokenLogProbs eval_infer(const PolicyParams& params, std::span<const int> tokens, std::size_t prompt_len,
                         const MismatchModel& mismatch, SequenceKey key)
{
    mismatch.validate();
    const SequenceRef s{tokens, prompt_len, key};
    EvalRequest req;
    req.tag = EngineTag::infer;
    req.options.engine = mismatch.noise();
    return evaluate(params, std::span(&s, 1), req)[0];
}

TokenLogProbs eval_train_perturbed(const PolicyParams& params, std::span<const int> tokens, std::size_t prompt_len,
                                   const policy::PerturbationSpec& spec, const policy::PerturbationDraw& draw,
                                   SequenceKey key)
{
    const SequenceRef s{tokens, prompt_len, key};
    EvalRequest req;
    req.tag = EngineTag::train_perturbed;
    req.options.perturb = spec;
    req.options.draw = draw;
    return evaluate(params, std::span(&s, 1), req)[0];
}

namespace {

// Samples every response in [begin, end) to completion with one batched forward per
// distinct current length per step.
void sample_range(const PolicyParams& params, const MismatchModel& mismatch, const RolloutConfig& config,
                  const Environment& env, std::vector<Response>& responses, std::size_t begin, std::size_t end)
{
    const auto context = static_cast<std::size_t>(params.config.context_len);
    policy::ForwardOptions options;
    options.engine = mismatch.noise();
    std::vector<num::Rng> rngs;
    std::vector<std::size_t> active;
    for (std::size_t i = begin; i < end; ++i) {
        rngs.push_back(num::keyed_rng(config.seed, {responses[i].prompt_id, responses[i].sample_id}));
        if (responses[i].prompt.size() < context) {
            active.push_back(i);
        }
    }
    while (!active.empty()) {
        std::map<std::size_t, std::vector<std::size_t>> by_len;
        for (std::size_t i : active) {
            by_len[responses[i].prompt.size() + responses[i].tokens.size()].push_back(i);
        }
        std::vector<std::size_t> still;
        for (auto& [len, members] : by_len) {
            policy::SequenceBatch batch;
            batch.length = len;
            std::vector<std::size_t> rows;
            for (std::size_t m = 0; m < members.size(); ++m) {
                const auto seq = responses[members[m]].full_sequence();
                batch.tokens.insert(batch.tokens.end(), seq.begin(), seq.end());
                batch.keys.push_back(responses[members[m]].key());
                rows.push_back(m * len + len - 1);
            }
            num::Tape tape(false);
            const auto bound = policy::bind(tape, params);
            const num::Var lsm = policy::forward_log_softmax(bound, batch, rows, options);
            for (std::size_t m = 0; m < members.size(); ++m) {
                Response& r = responses[members[m]];
                const auto row = lsm.value().row(m);
                const int tok = policy::sample_token(row, config.temperature, rngs[members[m] - begin]);
                r.tokens.push_back(tok);
                r.infer_logprobs.push_back(row[static_cast<std::size_t>(tok)]);
                r.roles.push_back(Role::model);
                EnvStep step = env.after_model_token(r.prompt, r.tokens, r.roles);
                for (int obs : step.observation) {
                    if (r.prompt.size() + r.tokens.size() >= context) {
                        break;
                    }
                    r.tokens.push_back(obs);
                    r.infer_logprobs.push_back(std::nan(""));
                    r.roles.push_back(Role::tool);
                }
                r.finished = step.done;
                if (!step.done && r.tokens.size() < config.max_new && r.prompt.size() + r.tokens.size() < context) {
                    still.push_back(members[m]);
                }
            }
        }
        std::sort(still.begin(), still.end());
        active = std::move(still);
    }

    // Observation tokens are not sampled; score them with one replay forward.
    std::vector<std::vector<int>> seqs;
    std::vector<SequenceRef> refs;
    std::vector<std::size_t> owners;
    for (std::size_t i = begin; i < end; ++i) {
        const Response& r = responses[i];
        if (std::find(r.roles.begin(), r.roles.end(), Role::tool) != r.roles.end()) {
            seqs.push_back(r.full_sequence());
            owners.push_back(i);
        }
    }
    for (std::size_t k = 0; k < seqs.size(); ++k) {
        refs.push_back({seqs[k], responses[owners[k]].prompt.size(), responses[owners[k]].key()});
    }
    EvalRequest req;
    req.tag = EngineTag::infer;
    req.options = options;
    const auto replay = evaluate(params, refs, req);
    for (std::size_t k = 0; k < owners.size(); ++k) {
        Response& r = responses[owners[k]];
        for (std::size_t t = 0; t < r.tokens.size(); ++t) {
            if (r.roles[t] == Role::tool) {
                r.infer_logprobs[t] = replay[k].values[t];
            }
        }
    }
}

} // namespace

RolloutBatch rollout(const PolicyParams& params_old, const MismatchModel& mismatch, std::span<const Prompt> prompts,
                     const RolloutConfig& config, const Environment& env)
{
    mismatch.validate();
    if (prompts.empty()) {
        throw std::invalid_argument("rollout needs at least one prompt");
    }
    if (config.group_size < 2) {
        throw std::invalid_argument("rollout group_size must be >= 2 for group advantages");
    }
    if (!(config.temperature > 0.0)) {
        throw std::invalid_argument("temperature must be positive");
    }
    if (config.max_new == 0) {
        throw std::invalid_argument("max_new must be at least 1");
    }
    RolloutBatch batch;
    batch.params_version = params_old.version;
    batch.group_size = config.group_size;
    batch.mismatch = mismatch;
    for (const Prompt& p : prompts) {
        if (p.tokens.empty()) {
            throw std::invalid_argument("empty prompt " + std::to_string(p.id));
        }
        for (std::size_t j = 0; j < config.group_size; ++j) {
            Response r;
            r.prompt_id = p.id;
            r.sample_id = j;
            r.prompt = p.tokens;
            batch.responses.push_back(std::move(r));
        }
    }
    const std::size_t total = batch.responses.size();
    const std::size_t chunks = std::clamp<std::size_t>(config.workers, 1, total);
    num::parallel_for(chunks, chunks, [&](std::size_t c) {
        sample_range(params_old, mismatch, config, env, batch.responses, c * total / chunks, (c + 1) * total / chunks);
    });
    return batch;
}

} // namespace alp::engines
