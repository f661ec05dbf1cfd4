#include "alp/expcli/expcli.hpp"

#include <fstream>
#include <sstream>

namespace alp::expcli {

namespace {

ReplayArm run_arm(std::string name, const trainer::RunSetup& setup, const trainer::RunState& state,
                  const engines::RolloutBatch& batch, std::size_t n_updates)
{
    trainer::RunState copy = state;
    auto res = trainer::update_on_batch(copy, setup, batch, n_updates);
    if (res.divergence) {
        throw std::runtime_error("replay_envelope: arm " + name + " diverged: " + res.divergence->reason);
    }
    ReplayArm arm;
    arm.name = std::move(name);
    if (setup.perturbs()) {
        for (double ls : state.params.perturb_log_sigma.data()) {
            arm.sigma.push_back(std::exp(ls));
        }
    }
    arm.envelope = diagnostics::ratio_envelope(res.envelope_log_ratios, res.envelope_rollout_probs, setup.envelope);
    return arm;
}

} // namespace

ReplayReport replay_envelope(const trainer::RunSetup& setup, const trainer::RunState& state, std::size_t n_updates)
{
    if (!setup.perturbs()) {
        throw ConfigError("replay_envelope needs a run whose method perturbs the numerator (token-alp or seq-alp) "
                          "and a non-empty perturbation target set");
    }
    ReplayReport r;
    r.iter = state.iter;
    r.n_updates = n_updates;
    r.zeta_std = setup.mismatch.zeta_std;
    const auto batch = trainer::collect(setup, state.params, state.iter);

    trainer::RunSetup plain = setup;
    plain.perturbation = policy::PerturbationSpec::none();
    r.unperturbed = run_arm("unperturbed", plain, state, batch, n_updates);
    r.perturbed = run_arm("perturbed", setup, state, batch, n_updates);

    for (const auto& b : r.unperturbed.envelope.bins) {
        if (const auto* pb = r.perturbed.envelope.find(b.index)) {
            r.lowest_common_bin = b.index;
            r.unperturbed_low_p99 = b.abs_p99;
            r.perturbed_low_p99 = pb->abs_p99;
            break;
        }
    }
    return r;
}

ReplayReport replay_envelope(const fs::path& run_dir, const fs::path& checkpoint, std::size_t n_updates,
                             std::optional<double> zeta_std)
{
    const fs::path cfg_path = run_dir / "config.json";
    if (!fs::exists(cfg_path)) {
        throw std::runtime_error("replay_envelope: no config.json in " + run_dir.string());
    }
    if (!fs::is_directory(checkpoint) || !fs::exists(checkpoint / "policy.ckpt")) {
        throw std::runtime_error("replay_envelope: missing checkpoint " + checkpoint.string());
    }
    const ExperimentConfig cfg = load_config(cfg_path);
    trainer::RunSetup setup = cfg.setup;
    setup.trainer.seed = cfg.seeds.front();
    if (zeta_std) {
        setup.mismatch.zeta_std = *zeta_std;
        setup.mismatch.validate();
    }
    const auto state = trainer::load_state(setup, checkpoint);
    return replay_envelope(setup, state, n_updates);
}

json to_json(const ReplayReport& r)
{
    auto arm = [](const ReplayArm& a) {
        return json{{"name", a.name},
                    {"sigma", a.sigma},
                    {"envelope", json::parse(diagnostics::envelope_to_json(a.envelope))}};
    };
    return {{"iter", r.iter},
            {"n_updates", r.n_updates},
            {"zeta_std", r.zeta_std},
            {"unperturbed", arm(r.unperturbed)},
            {"perturbed", arm(r.perturbed)},
            {"lowest_common_bin", r.lowest_common_bin ? json(*r.lowest_common_bin) : json(nullptr)},
            {"unperturbed_low_p99", r.unperturbed_low_p99},
            {"perturbed_low_p99", r.perturbed_low_p99},
            {"perturbed_within_unperturbed",
             r.lowest_common_bin.has_value() && r.perturbed_low_p99 <= r.unperturbed_low_p99}};
}

} // namespace alp::expcli
