#include "alp/expcli/expcli.hpp"

#include "alp/theorylab/theorylab.hpp"

#include <set>
#include <sstream>

namespace alp::expcli {

namespace tl = theorylab;

namespace {

/// Probe parameters: defaults merged with the caller's object; unknown keys are errors.
class Params {
public:
    Params(std::string probe, json defaults, const json& given) : probe_(std::move(probe)), doc_(std::move(defaults))
    {
        if (given.is_null()) {
            return;
        }
        if (!given.is_object()) {
            throw ConfigError(probe_ + ": parameters must be an object");
        }
        for (const auto& [k, v] : given.items()) {
            if (!doc_.contains(k)) {
                throw ConfigError(probe_ + ": unknown parameter " + k);
            }
            doc_[k] = v;
        }
    }

    template <class T>
    T get(const std::string& key) const
    {
        try {
            return doc_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError(probe_ + ": parameter " + key + " has the wrong type");
        }
    }

    const json& doc() const noexcept { return doc_; }

private:
    std::string probe_;
    json doc_;
};

template <class F>
auto checked(const std::string& probe, F&& f)
{
    try {
        return f();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(probe + ": " + e.what());
    }
}

std::vector<double> linspace(double lo, double hi, std::size_t n)
{
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    }
    return out;
}

json stein(const json& given)
{
    const Params p("stein",
                   {{"actions", 3}, {"dim", 2}, {"model_seed", 11}, {"x", {0.3, -0.2}},
                    {"sigmas", {0.3, 0.5, 1.0}}, {"n_mc", 1000000}, {"seed", 5}, {"fd_step", 1e-4}},
                   given);
    return checked("stein", [&] {
        const auto model = tl::OneLayerModel::random(p.get<std::size_t>("actions"), p.get<std::size_t>("dim"),
                                                     p.get<std::uint64_t>("model_seed"));
        const auto x = p.get<std::vector<double>>("x");
        json results = json::array();
        double worst = 0.0;
        for (double s : p.get<std::vector<double>>("sigmas")) {
            const auto r = tl::stein_check(model, x, s, p.get<std::size_t>("n_mc"), p.get<std::uint64_t>("seed"),
                                           p.get<double>("fd_step"));
            worst = std::max(worst, r.max_dev_combined_se);
            results.push_back(tl::to_json(r));
        }
        return json{{"probe", "stein"}, {"params", p.doc()}, {"results", results},
                    {"max_dev_combined_se", worst}};
    });
}

json kl_bound(const json& given)
{
    const tl::KlProbeConfig d;
    const Params p("kl-bound",
                   {{"actions", 8}, {"dim", 4}, {"model_seed", 21}, {"sigmas", d.sigma_grid},
                    {"zeta_norms", d.zeta_grid}, {"n_mc", d.n_mc}, {"n_x", d.n_x}, {"seed", d.seed},
                    {"stderr_multiple", d.stderr_multiple}},
                   given);
    return checked("kl-bound", [&] {
        const auto model = tl::OneLayerModel::random(p.get<std::size_t>("actions"), p.get<std::size_t>("dim"),
                                                     p.get<std::uint64_t>("model_seed"));
        tl::KlProbeConfig c;
        c.sigma_grid = p.get<std::vector<double>>("sigmas");
        c.zeta_grid = p.get<std::vector<double>>("zeta_norms");
        c.n_mc = p.get<std::size_t>("n_mc");
        c.n_x = p.get<std::size_t>("n_x");
        c.seed = p.get<std::uint64_t>("seed");
        c.stderr_multiple = p.get<double>("stderr_multiple");
        c.validate();
        return json{{"probe", "kl-bound"}, {"params", p.doc()}, {"result", tl::to_json(tl::kl_bound_check(model, c))}};
    });
}

json taylor(const json& given)
{
    const Params p("taylor",
                   {{"actions", 8}, {"dim", 4}, {"model_seed", 21}, {"n_x", 8}, {"x_seed", 3},
                    {"zeta_norms", {0.2, 0.1, 0.05}}, {"n_draws", 20000}, {"seed", 4}},
                   given);
    return checked("taylor", [&] {
        const auto model = tl::OneLayerModel::random(p.get<std::size_t>("actions"), p.get<std::size_t>("dim"),
                                                     p.get<std::uint64_t>("model_seed"));
        const auto xs = tl::gaussian_points(p.get<std::size_t>("n_x"), model.dim(), p.get<std::uint64_t>("x_seed"));
        const auto zg = p.get<std::vector<double>>("zeta_norms");
        return json{{"probe", "taylor"},
                    {"params", p.doc()},
                    {"result", tl::to_json(tl::taylor_kl_check(model, xs, zg, p.get<std::size_t>("n_draws"),
                                                               p.get<std::uint64_t>("seed")))}};
    });
}

json smoothness(const json& given)
{
    const tl::SmoothnessConfig d;
    const Params p("smoothness",
                   {{"theta_seed", 7}, {"theta_scale", 0.3}, {"x_lo", -1.0}, {"x_hi", 1.5}, {"x_points", 51},
                    {"sigmas", d.sigma_grid}, {"n_mc", d.n_mc}, {"stderr_batches", d.stderr_batches},
                    {"seed", d.seed}},
                   given);
    return checked("smoothness", [&] {
        const tl::SpikeFamily fam;
        const auto obj = fam.objective();
        const auto model = tl::OneLayerModel::random(fam.actions(), tl::SpikeFamily::kFeatures,
                                                     p.get<std::uint64_t>("theta_seed"), p.get<double>("theta_scale"));
        tl::SmoothnessConfig c;
        c.x_grid = linspace(p.get<double>("x_lo"), p.get<double>("x_hi"), p.get<std::size_t>("x_points"));
        c.sigma_grid = p.get<std::vector<double>>("sigmas");
        c.n_mc = p.get<std::size_t>("n_mc");
        c.stderr_batches = p.get<std::size_t>("stderr_batches");
        c.seed = p.get<std::uint64_t>("seed");
        return json{{"probe", "smoothness"},
                    {"params", p.doc()},
                    {"result", tl::to_json(tl::smoothness_check(obj, model.weights(), c))}};
    });
}

json landscape(const json& given, const fs::path& out_dir)
{
    const tl::LandscapeConfig d;
    const Params p("landscape",
                   {{"sigmas", {0.0, 0.005, 0.01, 0.02, 0.05, 0.1}}, {"bracket_lo", 0.001}, {"bracket_hi", 0.1},
                    {"quad_nodes", d.quad_nodes}, {"x_points", d.x_points}},
                   given);
    return checked("landscape", [&] {
        tl::LandscapeConfig c;
        c.quad_nodes = p.get<std::size_t>("quad_nodes");
        c.x_points = p.get<std::size_t>("x_points");
        c.validate();
        const auto sigmas = p.get<std::vector<double>>("sigmas");
        const auto r = tl::landscape_toy(c, sigmas, p.get<double>("bracket_lo"), p.get<double>("bracket_hi"));
        std::ostringstream csv;
        tl::write_landscape_csv(r, csv);
        write_atomic(out_dir / "landscape.csv", csv.str());
        return json{{"probe", "landscape"}, {"params", p.doc()}, {"result", tl::to_json(r)}};
    });
}

} // namespace

std::vector<std::string> theory_probes()
{
    return {"stein", "kl-bound", "taylor", "smoothness", "landscape"};
}

json theory_probe(const std::string& probe, const json& params, const fs::path& out_dir)
{
    fs::create_directories(out_dir);
    json report;
    if (probe == "stein") {
        report = stein(params);
    } else if (probe == "kl-bound") {
        report = kl_bound(params);
    } else if (probe == "taylor") {
        report = taylor(params);
    } else if (probe == "smoothness") {
        report = smoothness(params);
    } else if (probe == "landscape") {
        report = landscape(params, out_dir);
    } else {
        throw ConfigError("unknown theory probe " + probe);
    }
    write_atomic(out_dir / (probe + ".json"), report.dump(2) + "\n");
    return report;
}

} // namespace alp::expcli
