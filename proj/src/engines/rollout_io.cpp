#include "alp/engines/engines.hpp"

#include <nlohmann/json.hpp>

#include <istream>
#include <ostream>
#include <stdexcept>

namespace alp::engines {

using Json = nlohmann::ordered_json;

void write_jsonl(const RolloutBatch& batch, std::ostream& out)
{
    Json head;
    head["kind"] = "rollout_batch";
    head["schema_version"] = RolloutBatch::kSchemaVersion;
    head["params_version"] = batch.params_version;
    head["group_size"] = batch.group_size;
    head["mismatch"] = {{"zeta_std", batch.mismatch.zeta_std},
                        {"round_bits", batch.mismatch.round_bits ? Json(*batch.mismatch.round_bits) : Json(nullptr)},
                        {"seed_stream", batch.mismatch.seed_stream}};
    head["responses"] = batch.responses.size();
    out << head.dump() << '\n';
    for (const Response& r : batch.responses) {
        Json rec;
        rec["schema_version"] = RolloutBatch::kSchemaVersion;
        rec["prompt_id"] = r.prompt_id;
        rec["sample_id"] = r.sample_id;
        rec["prompt"] = r.prompt;
        rec["tokens"] = r.tokens;
        rec["infer_logprobs"] = r.infer_logprobs;
        std::vector<int> roles;
        for (Role role : r.roles) {
            roles.push_back(static_cast<int>(role));
        }
        rec["turn_mask"] = roles;
        rec["reward"] = r.reward;
        rec["advantage"] = r.advantage;
        rec["finished"] = r.finished;
        out << rec.dump() << '\n';
    }
}

RolloutBatch read_jsonl(std::istream& in)
{
    std::string line;
    if (!std::getline(in, line)) {
        throw std::runtime_error("rollout jsonl: missing header");
    }
    const Json head = Json::parse(line);
    if (head.value("kind", "") != "rollout_batch" || head.at("schema_version") != RolloutBatch::kSchemaVersion) {
        throw std::runtime_error("rollout jsonl: unsupported header " + line);
    }
    RolloutBatch b;
    b.params_version = head.at("params_version");
    b.group_size = head.at("group_size");
    const Json& mm = head.at("mismatch");
    b.mismatch.zeta_std = mm.at("zeta_std");
    if (!mm.at("round_bits").is_null()) {
        b.mismatch.round_bits = mm.at("round_bits").get<int>();
    }
    b.mismatch.seed_stream = mm.at("seed_stream");
    const std::size_t n = head.at("responses");
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const Json rec = Json::parse(line);
        if (rec.at("schema_version") != RolloutBatch::kSchemaVersion) {
            throw std::runtime_error("rollout jsonl: record schema mismatch");
        }
        Response r;
        r.prompt_id = rec.at("prompt_id");
        r.sample_id = rec.at("sample_id");
        r.prompt = rec.at("prompt").get<std::vector<int>>();
        r.tokens = rec.at("tokens").get<std::vector<int>>();
        r.infer_logprobs = rec.at("infer_logprobs").get<std::vector<double>>();
        for (int role : rec.at("turn_mask").get<std::vector<int>>()) {
            if (role < 0 || role > 2) {
                throw std::runtime_error("rollout jsonl: bad role value");
            }
            r.roles.push_back(static_cast<Role>(role));
        }
        r.reward = rec.at("reward");
        r.advantage = rec.at("advantage");
        r.finished = rec.at("finished");
        if (r.tokens.size() != r.infer_logprobs.size() || r.tokens.size() != r.roles.size()) {
            throw std::runtime_error("rollout jsonl: per-token arrays disagree in length");
        }
        b.responses.push_back(std::move(r));
    }
    if (b.responses.size() != n) {
        throw std::runtime_error("rollout jsonl: expected " + std::to_string(n) + " responses");
    }
    return b;
}

} // namespace alp::engines
