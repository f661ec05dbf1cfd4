#include "alp/expcli/expcli.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

namespace alp::expcli {

namespace {

std::string num(double v)
{
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    if (!in) {
        throw std::runtime_error("emit_plotdata: missing file " + p.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> split(const std::string& line)
{
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) {
        out.push_back(cell);
    }
    return out;
}

struct MetricsTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name, const fs::path& file) const
    {
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (header[i] == name) {
                return i;
            }
        }
        throw std::runtime_error("emit_plotdata: " + file.string() + " has no column " + name);
    }
};

MetricsTable read_metrics(const fs::path& dir)
{
    const fs::path file = dir / "metrics.csv";
    std::istringstream in(slurp(file));
    MetricsTable t;
    std::string line;
    if (!std::getline(in, line)) {
        throw std::runtime_error("emit_plotdata: empty " + file.string());
    }
    t.header = split(line);
    while (std::getline(in, line)) {
        if (!line.empty()) {
            t.rows.push_back(split(line));
        }
    }
    return t;
}

/// The run directory as given, so labels stay unique across configs sharing a name.
std::string run_label(const fs::path& dir)
{
    if (!fs::exists(dir / "config.json")) {
        throw std::runtime_error("emit_plotdata: " + dir.string() + " is not a run directory");
    }
    std::string s = dir.lexically_normal().generic_string();
    while (s.size() > 1 && s.back() == '/') {
        s.pop_back();
    }
    return s;
}

struct Row {
    std::string series, x, y, quantile;
};

std::string tidy(const std::vector<Row>& rows)
{
    std::string out = "series,x,y,quantile\n";
    for (const auto& r : rows) {
        out += r.series + "," + r.x + "," + r.y + "," + r.quantile + "\n";
    }
    return out;
}

/// One series per (run, column); x from `x_col`; rows with "nan" are skipped.
void metric_series(const fs::path& dir, const std::string& x_col, const std::vector<std::string>& cols,
                   bool first_update_only, std::vector<Row>& out, const std::string& quantile_prefix = "")
{
    const auto t = read_metrics(dir);
    const auto file = dir / "metrics.csv";
    const std::string label = run_label(dir);
    const std::size_t xi = t.column(x_col, file), ui = t.column("update", file);
    for (const auto& c : cols) {
        const std::size_t ci = t.column(c, file);
        const bool is_q = !quantile_prefix.empty() && c.rfind(quantile_prefix, 0) == 0;
        for (const auto& r : t.rows) {
            if ((first_update_only && r[ui] != "0") || r[ci] == "nan") {
                continue;
            }
            out.push_back({label + (is_q ? "" : ":" + c), r[xi], r[ci], is_q ? c.substr(quantile_prefix.size()) : ""});
        }
    }
}

std::vector<std::string> columns_with_prefix(const fs::path& dir, const std::string& prefix)
{
    const auto t = read_metrics(dir);
    std::vector<std::string> out;
    for (const auto& h : t.header) {
        if (h.rfind(prefix, 0) == 0) {
            out.push_back(h);
        }
    }
    if (out.empty()) {
        throw std::runtime_error("emit_plotdata: " + (dir / "metrics.csv").string() + " has no " + prefix + "* columns");
    }
    return out;
}

} // namespace

std::vector<std::string> plot_figures()
{
    return {"reward", "grad-norm", "entropy", "kl", "log-ratio", "sigma", "pass-at-k", "envelope"};
}

fs::path emit_plotdata(std::span<const fs::path> run_dirs, const std::string& figure, const fs::path& out_dir)
{
    if (run_dirs.empty()) {
        throw std::invalid_argument("emit_plotdata: no run directories");
    }
    std::string text;
    if (figure == "pass-at-k") {
        std::vector<json> runs;
        std::map<std::string, int> method_count;
        for (const auto& d : run_dirs) {
            auto j = json::parse(slurp(d / "pass_at_k.json"));
            ++method_count[j.at("method").get<std::string>()];
            runs.push_back(std::move(j));
        }
        text = "method,k,pass_at_k\n";
        for (std::size_t r = 0; r < runs.size(); ++r) {
            const auto& j = runs[r];
            std::string m = j.at("method").get<std::string>();
            if (method_count[m] > 1) {
                m += "/" + run_label(run_dirs[r]);
            }
            const auto ks = j.at("k").get<std::vector<std::size_t>>();
            const auto vs = j.at("pass_at_k").get<std::vector<double>>();
            for (std::size_t i = 0; i < ks.size(); ++i) {
                text += m + "," + std::to_string(ks[i]) + "," + num(vs.at(i)) + "\n";
            }
        }
    } else if (figure == "envelope") {
        std::vector<Row> rows;
        for (const auto& d : run_dirs) {
            const auto rep = json::parse(slurp(d / "replay_envelope.json"));
            const std::string label = run_label(d);
            for (const char* arm : {"unperturbed", "perturbed"}) {
                const auto& env = rep.at(arm).at("envelope");
                const auto levels = env.at("levels").get<std::vector<double>>();
                for (const auto& b : env.at("bins")) {
                    const auto q = b.at("quantiles").get<std::vector<double>>();
                    for (std::size_t i = 0; i < levels.size(); ++i) {
                        rows.push_back({label + ":" + arm, std::to_string(b.at("index").get<std::size_t>()),
                                        num(q.at(i)), num(levels[i])});
                    }
                }
            }
        }
        text = tidy(rows);
    } else {
        std::vector<Row> rows;
        for (const auto& d : run_dirs) {
            if (figure == "reward") {
                metric_series(d, "iter", {"reward_mean"}, true, rows);
            } else if (figure == "grad-norm") {
                metric_series(d, "step", {"grad_norm"}, false, rows);
            } else if (figure == "entropy") {
                metric_series(d, "step", {"entropy"}, false, rows);
            } else if (figure == "kl") {
                metric_series(d, "step", {"kl_train_infer", "kl_policy_update", "kl_heldout"}, false, rows);
            } else if (figure == "log-ratio") {
                metric_series(d, "step", columns_with_prefix(d, "log_ratio_q"), false, rows, "log_ratio_q");
            } else if (figure == "sigma") {
                metric_series(d, "step", columns_with_prefix(d, "sigma_l"), false, rows);
            } else {
                throw std::invalid_argument("emit_plotdata: unknown figure " + figure);
            }
        }
        text = tidy(rows);
    }
    fs::create_directories(out_dir);
    const fs::path out = out_dir / (figure + ".csv");
    write_atomic(out, text);
    return out;
}

} // namespace alp::expcli
