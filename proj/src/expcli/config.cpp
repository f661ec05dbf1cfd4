#include "alp/expcli/expcli.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace alp::expcli {

namespace {

/// Strict view of one JSON object: every key must be consumed exactly once.
class Reader {
public:
    Reader(const json& obj, std::string path) : obj_(obj), path_(std::move(path))
    {
        if (!obj_.is_object()) {
            throw ConfigError(where() + " must be an object");
        }
    }

    ~Reader() noexcept(false)
    {
        if (std::uncaught_exceptions() > 0) {
            return;
        }
        for (const auto& [k, v] : obj_.items()) {
            if (!seen_.count(k)) {
                throw ConfigError("unknown key " + join(k));
            }
        }
    }

    template <class T>
    void integer(const char* key, T& out)
    {
        if (const json* v = take(key)) {
            if (!v->is_number_integer()) {
                throw ConfigError(join(key) + " must be an integer");
            }
            if constexpr (std::is_unsigned_v<T>) {
                if (v->is_number_unsigned()) {
                    out = v->get<T>();
                    return;
                }
                if (v->get<std::int64_t>() < 0) {
                    throw ConfigError(join(key) + " must be non-negative");
                }
            }
            out = v->get<T>();
        }
    }

    void real(const char* key, double& out)
    {
        if (const json* v = take(key)) {
            if (!v->is_number()) {
                throw ConfigError(join(key) + " must be a number");
            }
            out = v->get<double>();
        }
    }

    void boolean(const char* key, bool& out)
    {
        if (const json* v = take(key)) {
            if (!v->is_boolean()) {
                throw ConfigError(join(key) + " must be a boolean");
            }
            out = v->get<bool>();
        }
    }

    void string(const char* key, std::string& out)
    {
        if (const json* v = take(key)) {
            if (!v->is_string()) {
                throw ConfigError(join(key) + " must be a string");
            }
            out = v->get<std::string>();
        }
    }

    template <class E, class Parse>
    void enumeration(const char* key, E& out, Parse parse)
    {
        std::string s;
        if (peek(key)) {
            string(key, s);
            out = convert(key, s, parse);
        }
    }

    template <class E, class Parse>
    void optional_enum(const char* key, std::optional<E>& out, Parse parse)
    {
        if (const json* v = peek(key)) {
            if (v->is_null()) {
                take(key);
                out.reset();
                return;
            }
            std::string s;
            string(key, s);
            out = convert(key, s, parse);
        }
    }

    void optional_int(const char* key, std::optional<int>& out)
    {
        if (const json* v = peek(key)) {
            if (v->is_null()) {
                take(key);
                out.reset();
                return;
            }
            int x = 0;
            integer(key, x);
            out = x;
        }
    }

    void reals(const char* key, std::vector<double>& out)
    {
        if (const json* v = take(key)) {
            if (!v->is_array()) {
                throw ConfigError(join(key) + " must be an array of numbers");
            }
            out.clear();
            for (const auto& e : *v) {
                if (!e.is_number()) {
                    throw ConfigError(join(key) + " must be an array of numbers");
                }
                out.push_back(e.get<double>());
            }
        }
    }

    void seeds(const char* key, std::vector<std::uint64_t>& out)
    {
        if (const json* v = take(key)) {
            if (!v->is_array()) {
                throw ConfigError(join(key) + " must be an array of non-negative integers");
            }
            out.clear();
            for (const auto& e : *v) {
                if (!e.is_number_integer() || (!e.is_number_unsigned() && e.get<std::int64_t>() < 0)) {
                    throw ConfigError(join(key) + " must be an array of non-negative integers");
                }
                out.push_back(e.get<std::uint64_t>());
            }
        }
    }

    /// Nested object, or nullptr when absent.
    const json* object(const char* key) { return take(key); }
    std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    std::string where() const { return path_.empty() ? "config" : path_; }

    const json* peek(const char* key) const
    {
        auto it = obj_.find(key);
        return it == obj_.end() ? nullptr : &*it;
    }

    const json* take(const char* key)
    {
        const json* v = peek(key);
        if (v) {
            seen_.insert(key);
        }
        return v;
    }

    template <class Parse>
    auto convert(const char* key, const std::string& s, Parse parse) -> decltype(parse(s))
    {
        try {
            return parse(s);
        } catch (const std::exception& e) {
            throw ConfigError(join(key) + ": " + e.what());
        }
    }

    const json& obj_;
    std::string path_;
    std::set<std::string> seen_;
};

json optional_json(const auto& opt)
{
    if (!opt) {
        return nullptr;
    }
    if constexpr (std::is_same_v<std::decay_t<decltype(*opt)>, int>) {
        return *opt;
    } else {
        return objectives::to_string(*opt);
    }
}

} // namespace

void ExperimentConfig::validate() const
{
    if (name.empty()) {
        throw ConfigError("name must not be empty");
    }
    if (output_dir.empty()) {
        throw ConfigError("output_dir must not be empty");
    }
    if (seeds.empty()) {
        throw ConfigError("seeds must list at least one seed");
    }
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
        throw ConfigError("seeds must be distinct");
    }
    if (options.pass_at_k_samples == 0 || options.pass_at_k_prompts == 0) {
        throw ConfigError("diagnostics.pass_at_k_prompts and pass_at_k_samples must be positive");
    }
    try {
        setup.validate();
        setup.envelope.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

json to_json(const ExperimentConfig& c)
{
    const auto& s = c.setup;
    const auto& t = s.trainer;
    const auto& o = s.objective;
    return {
        {"name", c.name},
        {"output_dir", c.output_dir},
        {"seeds", c.seeds},
        {"task",
         {{"kind", tasks::to_string(s.task.kind)},
          {"modulus", s.task.modulus},
          {"vocab_size", s.task.vocab_size},
          {"min_content", s.task.min_content},
          {"max_content", s.task.max_content},
          {"answer_len", s.task.answer_len},
          {"max_turns", s.task.max_turns},
          {"max_new", s.task.max_new}}},
        {"policy",
         {{"vocab_size", s.policy.vocab_size},
          {"context_len", s.policy.context_len},
          {"n_layers", s.policy.n_layers},
          {"d_model", s.policy.d_model},
          {"n_heads", s.policy.n_heads},
          {"ln_eps", s.policy.ln_eps}}},
        {"trainer",
         {{"prompts_per_iter", t.prompts_per_iter},
          {"group_size", t.group_size},
          {"updates_per_iter", t.updates_per_iter},
          {"micro_batch", t.micro_batch},
          {"lr_theta", t.lr_theta},
          {"weight_decay", t.weight_decay},
          {"lr_sigma", t.lr_sigma},
          {"sigma_init", t.sigma_init},
          {"adam_beta1", t.adam.beta1},
          {"adam_beta2", t.adam.beta2},
          {"adam_eps", t.adam.eps},
          {"total_iters", t.total_iters},
          {"temperature", t.temperature},
          {"rollout_workers", t.rollout_workers},
          {"heldout_prompts", t.heldout_prompts},
          {"divergence_factor", t.divergence_factor},
          {"divergence_window", t.divergence_window},
          {"divergence_min_history", t.divergence_min_history}}},
        {"objective",
         {{"method", objectives::to_string(o.method)},
          {"eps_lo", o.eps_lo},
          {"eps_hi", o.eps_hi},
          {"seq_clip_mode", objectives::to_string(o.seq_clip_mode)},
          {"seq_clip_lo", o.seq_clip_lo},
          {"seq_clip_hi", o.seq_clip_hi},
          {"mask_threshold", o.mask_threshold},
          {"mis_level", optional_json(o.mis_level)},
          {"dual_clip_c", o.dual_clip_c},
          {"kl_coef", o.kl_coef},
          {"entropy_coef", o.entropy_coef},
          {"aggregation", optional_json(o.aggregation)}}},
        {"mismatch",
         {{"zeta_std", s.mismatch.zeta_std},
          {"round_bits", optional_json(s.mismatch.round_bits)},
          {"seed_stream", s.mismatch.seed_stream}}},
        {"perturbation",
         {{"mode", policy::to_string(s.perturbation.mode)},
          {"band_lo", s.perturbation.band_lo},
          {"band_hi", s.perturbation.band_hi}}},
        {"diagnostics",
         {{"envelope_edges", s.envelope.edges},
          {"envelope_levels", s.envelope.levels},
          {"pass_at_k_prompts", c.options.pass_at_k_prompts},
          {"pass_at_k_samples", c.options.pass_at_k_samples},
          {"checkpoint_every", c.options.checkpoint_every},
          {"envelope_per_iteration", c.options.envelope_per_iteration}}},
    };
}

ExperimentConfig config_from_json(const json& doc)
{
    ExperimentConfig c;
    auto& s = c.setup;
    {
        Reader r(doc, "");
        r.string("name", c.name);
        r.string("output_dir", c.output_dir);
        r.seeds("seeds", c.seeds);
        if (const json* v = r.object("task")) {
            Reader t(*v, "task");
            t.enumeration("kind", s.task.kind, tasks::task_kind_from_string);
            t.integer("modulus", s.task.modulus);
            t.integer("vocab_size", s.task.vocab_size);
            t.integer("min_content", s.task.min_content);
            t.integer("max_content", s.task.max_content);
            t.integer("answer_len", s.task.answer_len);
            t.integer("max_turns", s.task.max_turns);
            t.integer("max_new", s.task.max_new);
        }
        if (const json* v = r.object("policy")) {
            Reader p(*v, "policy");
            p.integer("vocab_size", s.policy.vocab_size);
            p.integer("context_len", s.policy.context_len);
            p.integer("n_layers", s.policy.n_layers);
            p.integer("d_model", s.policy.d_model);
            p.integer("n_heads", s.policy.n_heads);
            p.real("ln_eps", s.policy.ln_eps);
        }
        if (const json* v = r.object("trainer")) {
            auto& t = s.trainer;
            Reader q(*v, "trainer");
            q.integer("prompts_per_iter", t.prompts_per_iter);
            q.integer("group_size", t.group_size);
            q.integer("updates_per_iter", t.updates_per_iter);
            q.integer("micro_batch", t.micro_batch);
            q.real("lr_theta", t.lr_theta);
            q.real("weight_decay", t.weight_decay);
            q.real("lr_sigma", t.lr_sigma);
            q.real("sigma_init", t.sigma_init);
            q.real("adam_beta1", t.adam.beta1);
            q.real("adam_beta2", t.adam.beta2);
            q.real("adam_eps", t.adam.eps);
            q.integer("total_iters", t.total_iters);
            q.real("temperature", t.temperature);
            q.integer("rollout_workers", t.rollout_workers);
            q.integer("heldout_prompts", t.heldout_prompts);
            q.real("divergence_factor", t.divergence_factor);
            q.integer("divergence_window", t.divergence_window);
            q.integer("divergence_min_history", t.divergence_min_history);
        }
        if (const json* v = r.object("objective")) {
            auto& o = s.objective;
            Reader q(*v, "objective");
            q.enumeration("method", o.method, objectives::method_from_string);
            q.real("eps_lo", o.eps_lo);
            q.real("eps_hi", o.eps_hi);
            q.enumeration("seq_clip_mode", o.seq_clip_mode, objectives::seq_clip_mode_from_string);
            q.real("seq_clip_lo", o.seq_clip_lo);
            q.real("seq_clip_hi", o.seq_clip_hi);
            q.real("mask_threshold", o.mask_threshold);
            q.optional_enum("mis_level", o.mis_level, objectives::mask_level_from_string);
            q.real("dual_clip_c", o.dual_clip_c);
            q.real("kl_coef", o.kl_coef);
            q.real("entropy_coef", o.entropy_coef);
            q.optional_enum("aggregation", o.aggregation, objectives::aggregation_from_string);
        }
        if (const json* v = r.object("mismatch")) {
            Reader q(*v, "mismatch");
            q.real("zeta_std", s.mismatch.zeta_std);
            q.optional_int("round_bits", s.mismatch.round_bits);
            q.integer("seed_stream", s.mismatch.seed_stream);
        }
        if (const json* v = r.object("perturbation")) {
            Reader q(*v, "perturbation");
            q.enumeration("mode", s.perturbation.mode, policy::perturb_mode_from_string);
            q.integer("band_lo", s.perturbation.band_lo);
            q.integer("band_hi", s.perturbation.band_hi);
        }
        if (const json* v = r.object("diagnostics")) {
            Reader q(*v, "diagnostics");
            q.reals("envelope_edges", s.envelope.edges);
            q.reals("envelope_levels", s.envelope.levels);
            q.integer("pass_at_k_prompts", c.options.pass_at_k_prompts);
            q.integer("pass_at_k_samples", c.options.pass_at_k_samples);
            q.integer("checkpoint_every", c.options.checkpoint_every);
            q.boolean("envelope_per_iteration", c.options.envelope_per_iteration);
        }
    }
    c.validate();
    return c;
}

json parse_config_text(std::string_view text)
{
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
}

namespace {

std::string read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot read " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

ExperimentConfig load_config(const fs::path& path, std::span<const std::string> overrides)
{
    json doc = parse_config_text(read_file(path));
    if (is_preset_document(doc)) {
        throw ConfigError(path.string() + " is a preset; expand it with expand_preset");
    }
    for (const auto& o : overrides) {
        apply_override(doc, o);
    }
    return config_from_json(doc);
}

void apply_override(json& doc, std::string_view assignment)
{
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) {
        throw ConfigError("override must look like key.path=value: " + std::string(assignment));
    }
    const std::string key(assignment.substr(0, eq));
    const std::string text(assignment.substr(eq + 1));
    json value;
    try {
        value = json::parse(text);
    } catch (const json::parse_error&) {
        value = text;
    }
    json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) {
            throw ConfigError("override has an empty key segment: " + key);
        }
        if (!node->is_object()) {
            throw ConfigError("override " + key + " descends into a non-object");
        }
        if (dot == std::string::npos) {
            (*node)[part] = std::move(value);
            return;
        }
        node = &(*node)[part];
        if (node->is_null()) {
            *node = json::object();
        }
        start = dot + 1;
    }
}

std::string serialize_config(const ExperimentConfig& config)
{
    return to_json(config).dump(2) + "\n";
}

std::string sha256_hex(std::string_view bytes)
{
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
        throw std::runtime_error("sha256 failed");
    }
    std::string hex;
    char buf[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(buf, sizeof buf, "%02x", md[i]);
        hex += buf;
    }
    return hex;
}

std::string sha256_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot read " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return sha256_hex(ss.str());
}

fs::path output_root()
{
    const char* env = std::getenv("ALP_OUTPUT_ROOT");
    return env && *env ? fs::path(env) : fs::current_path();
}

fs::path resolve_output(const std::string& output_dir)
{
    const fs::path p(output_dir);
    return p.is_absolute() ? p : output_root() / p;
}

void write_atomic(const fs::path& path, std::string_view bytes)
{
    fs::path partial = path;
    partial += ".partial";
    {
        std::ofstream out(partial, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw std::runtime_error("cannot write " + partial.string());
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw std::runtime_error("write failed: " + partial.string());
        }
    }
    fs::rename(partial, path);
}

// ---------------------------------------------------------------------------------------

bool is_preset_document(const json& doc)
{
    return doc.is_object() && doc.contains("variants");
}

Preset load_preset(const fs::path& path)
{
    const json doc = parse_config_text(read_file(path));
    if (!is_preset_document(doc)) {
        throw ConfigError(path.string() + " is not a preset (no variants)");
    }
    Preset p;
    Reader r(doc, "");
    r.string("name", p.name);
    const json* base = r.object("base");
    if (!base || !base->is_object()) {
        throw ConfigError("preset base must be an object");
    }
    p.base = *base;
    const json* vars = r.object("variants");
    if (!vars->is_array() || vars->empty()) {
        throw ConfigError("preset variants must be a non-empty array");
    }
    for (const auto& v : *vars) {
        PresetVariant pv;
        Reader q(v, "variants[]");
        q.string("name", pv.name);
        if (const json* ov = q.object("overrides")) {
            if (!ov->is_object()) {
                throw ConfigError("variant overrides must be an object of key.path: value");
            }
            for (const auto& [k, val] : ov->items()) {
                pv.overrides.push_back(k + "=" + val.dump());
            }
        }
        if (pv.name.empty()) {
            throw ConfigError("every preset variant needs a name");
        }
        p.variants.push_back(std::move(pv));
    }
    return p;
}

std::vector<ExperimentConfig> expand_preset(const Preset& preset, std::span<const std::string> overrides)
{
    std::set<std::string> names;
    std::vector<ExperimentConfig> out;
    for (const auto& v : preset.variants) {
        if (!names.insert(v.name).second) {
            throw ConfigError("duplicate preset variant " + v.name);
        }
        json doc = preset.base;
        for (const auto& o : v.overrides) {
            apply_override(doc, o);
        }
        for (const auto& o : overrides) {
            apply_override(doc, o);
        }
        if (!doc.contains("name")) {
            doc["name"] = preset.name;
        }
        if (!doc["name"].is_string() || (doc.contains("output_dir") && !doc["output_dir"].is_string())) {
            throw ConfigError("name and output_dir must be strings");
        }
        doc["name"] = doc["name"].get<std::string>() + "/" + v.name;
        const std::string base_dir = doc.contains("output_dir") ? doc["output_dir"].get<std::string>()
                                                                 : "runs/" + preset.name;
        doc["output_dir"] = base_dir + "/" + v.name;
        out.push_back(config_from_json(doc));
    }
    return out;
}

} // namespace alp::expcli
