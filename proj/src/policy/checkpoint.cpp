#include "alp/policy/policy.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace alp::policy {
namespace {

constexpr const char* kMagic = "ALPCKPT 1";

std::string hex_double(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%a", v);
    return buf;
}

void put_le(std::string& out, double v)
{
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }
}

double get_le(const char* p)
{
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    }
    return std::bit_cast<double>(bits);
}

[[noreturn]] void corrupt(const std::string& what)
{
    throw std::runtime_error("corrupt checkpoint: " + what);
}

} // namespace

void save_checkpoint(const PolicyParams& params, const std::filesystem::path& path)
{
    std::ostringstream head;
    const auto& c = params.config;
    head << kMagic << '\n'
         << "config " << c.vocab_size << ' ' << c.context_len << ' ' << c.n_layers << ' ' << c.d_model << ' '
         << c.n_heads << ' ' << hex_double(c.ln_eps) << '\n'
         << "version " << params.version << '\n'
         << "tensors " << params.weights.size() + 1 << '\n';
    std::string payload;
    auto emit = [&](const std::string& name, const Tensor& t) {
        head << "tensor " << name << ' ' << t.rank();
        for (std::size_t d : t.shape()) {
            head << ' ' << d;
        }
        head << " offset " << payload.size() << '\n';
        for (double v : t.data()) {
            put_le(payload, v);
        }
    };
    for (std::size_t i = 0; i < params.weights.size(); ++i) {
        emit(params.names[i], params.weights[i]);
    }
    emit("perturb_log_sigma", params.perturb_log_sigma);
    head << "end\n";
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write checkpoint " + path.string());
    }
    const std::string h = head.str();
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) {
        throw std::runtime_error("failed writing checkpoint " + path.string());
    }
}

PolicyParams load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open checkpoint " + path.string());
    }
    std::string line;
    if (!std::getline(in, line) || line != kMagic) {
        corrupt("bad magic");
    }
    PolicyParams p;
    std::size_t count = 0;
    struct Entry {
        std::string name;
        num::Shape shape;
        std::size_t offset;
    };
    std::vector<Entry> entries;
    while (std::getline(in, line) && line != "end") {
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "config") {
            std::string eps;
            ls >> p.config.vocab_size >> p.config.context_len >> p.config.n_layers >> p.config.d_model >>
                p.config.n_heads >> eps;
            p.config.ln_eps = std::strtod(eps.c_str(), nullptr);
        } else if (key == "version") {
            ls >> p.version;
        } else if (key == "tensors") {
            ls >> count;
        } else if (key == "tensor") {
            Entry e;
            std::size_t rank = 0;
            ls >> e.name >> rank;
            e.shape.resize(rank);
            for (auto& d : e.shape) {
                ls >> d;
            }
            std::string off;
            ls >> off >> e.offset;
            if (off != "offset") {
                corrupt("malformed tensor line '" + line + "'");
            }
            entries.push_back(std::move(e));
        } else {
            corrupt("unexpected header line '" + line + "'");
        }
        if (!ls) {
            corrupt("malformed header line '" + line + "'");
        }
    }
    if (line != "end" || entries.size() != count || count == 0) {
        corrupt("truncated header");
    }
    p.config.validate();
    const std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::size_t expected = 0;
    for (const auto& e : entries) {
        const std::size_t bytes = num::shape_size(e.shape) * 8;
        if (e.offset != expected || e.offset + bytes > payload.size()) {
            corrupt("tensor '" + e.name + "' offset out of range");
        }
        Tensor t(e.shape);
        for (std::size_t i = 0; i < t.size(); ++i) {
            t[i] = get_le(payload.data() + e.offset + 8 * i);
        }
        expected += bytes;
        if (e.name == "perturb_log_sigma") {
            p.perturb_log_sigma = std::move(t);
        } else {
            p.names.push_back(e.name);
            p.weights.push_back(std::move(t));
        }
    }
    if (expected != payload.size()) {
        corrupt("trailing payload bytes");
    }
    const PolicyParams layout = PolicyParams::init(p.config, 0, 1.0);
    if (layout.names != p.names || p.perturb_log_sigma.size() != layout.perturb_log_sigma.size()) {
        corrupt("tensor set does not match the configured architecture");
    }
    for (std::size_t i = 0; i < p.weights.size(); ++i) {
        if (p.weights[i].shape() != layout.weights[i].shape()) {
            corrupt("tensor '" + p.names[i] + "' has the wrong shape");
        }
    }
    return p;
}

} // namespace alp::policy
