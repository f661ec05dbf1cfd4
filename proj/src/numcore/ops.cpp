#include "alp/numcore/ops.hpp"

#include "alp/numcore/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

namespace alp::num {
namespace {

void require_rank2(const Tensor& t, const char* op)
{
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
    }
}

void same_tape(Var a, Var b, const char* op)
{
    if (&a.tape() != &b.tape()) {
        throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
    }
}

void accumulate(Tensor& dst, const Tensor& src)
{
    kernels::active().axpy(1.0, src.ptr(), dst.ptr(), src.size());
}

} // namespace

Var matmul(Var a, Var b)
{
    same_tape(a, b, "matmul");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require_rank2(av, "matmul");
    require_rank2(bv, "matmul");
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    if (bv.dim(0) != k) {
        throw ShapeError("matmul: " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
    }
    Tensor out({m, n});
    kernels::active().gemm_nn(m, n, k, av.ptr(), bv.ptr(), out.ptr(), false);
    const auto ia = a.id(), ib = b.id();
    return a.tape().push(std::move(out), {a, b},
                         [ia, ib, m, n, k](Tape& t, const Tensor& g) {
                             const auto& kt = kernels::active();
                             if (t.requires_grad(ia)) {
                                 kt.gemm_nt(m, k, n, g.ptr(), t.value(ib).ptr(), t.adjoint(ia).ptr(), true);
                             }
                             if (t.requires_grad(ib)) {
                                 kt.gemm_tn(k, n, m, t.value(ia).ptr(), g.ptr(), t.adjoint(ib).ptr(), true);
                             }
                         },
                         "matmul");
}

Var add(Var a, Var b)
{
    same_tape(a, b, "add");
    require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    accumulate(out, b.value());
    const auto ia = a.id(), ib = b.id();
    return a.tape().push(std::move(out), {a, b},
                         [ia, ib](Tape& t, const Tensor& g) {
                             if (t.requires_grad(ia)) {
                                 accumulate(t.adjoint(ia), g);
                             }
                             if (t.requires_grad(ib)) {
                                 accumulate(t.adjoint(ib), g);
                             }
                         },
                         "add");
}

Var sub(Var a, Var b)
{
    same_tape(a, b, "sub");
    require_same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] -= bv[i];
    }
    const auto ia = a.id(), ib = b.id();
    return a.tape().push(std::move(out), {a, b},
                         [ia, ib](Tape& t, const Tensor& g) {
                             if (t.requires_grad(ia)) {
                                 accumulate(t.adjoint(ia), g);
                             }
                             if (t.requires_grad(ib)) {
                                 kernels::active().axpy(-1.0, g.ptr(), t.adjoint(ib).ptr(), g.size());
                             }
                         },
                         "sub");
}

Var mul(Var a, Var b)
{
    same_tape(a, b, "mul");
    require_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= bv[i];
    }
    const auto ia = a.id(), ib = b.id();
    return a.tape().push(std::move(out), {a, b},
                         [ia, ib](Tape& t, const Tensor& g) {
                             const Tensor& av = t.value(ia);
                             const Tensor& bv = t.value(ib);
                             if (t.requires_grad(ia)) {
                                 Tensor& da = t.adjoint(ia);
                                 for (std::size_t i = 0; i < g.size(); ++i) {
                                     da[i] += g[i] * bv[i];
                                 }
                             }
                             if (t.requires_grad(ib)) {
                                 Tensor& db = t.adjoint(ib);
                                 for (std::size_t i = 0; i < g.size(); ++i) {
                                     db[i] += g[i] * av[i];
                                 }
                             }
                         },
                         "mul");
}

Var scale(Var x, double factor)
{
    Tensor out = x.value();
    for (double& v : out.data()) {
        v *= factor;
    }
    const auto ix = x.id();
    return x.tape().push(std::move(out), {x},
                         [ix, factor](Tape& t, const Tensor& g) {
                             kernels::active().axpy(factor, g.ptr(), t.adjoint(ix).ptr(), g.size());
                         },
                         "scale");
}

Var add_bias(Var x, Var bias)
{
    same_tape(x, bias, "add_bias");
    const Tensor& xv = x.value();
    require_rank2(xv, "add_bias");
    const std::size_t m = xv.dim(0), n = xv.dim(1);
    if (bias.value().size() != n) {
        throw ShapeError("add_bias: bias " + shape_string(bias.shape()) + " for " + shape_string(xv.shape()));
    }
    Tensor out = xv;
    const Tensor& bv = bias.value();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] += bv[j];
        }
    }
    const auto ix = x.id(), ib = bias.id();
    return x.tape().push(std::move(out), {x, bias},
                         [ix, ib, m, n](Tape& t, const Tensor& g) {
                             if (t.requires_grad(ix)) {
                                 accumulate(t.adjoint(ix), g);
                             }
                             if (t.requires_grad(ib)) {
                                 Tensor& db = t.adjoint(ib);
                                 for (std::size_t i = 0; i < m; ++i) {
                                     for (std::size_t j = 0; j < n; ++j) {
                                         db[j] += g[i * n + j];
                                     }
                                 }
                             }
                         },
                         "add_bias");
}

Var add_constant(Var x, const Tensor& c)
{
    require_same_shape(x.value(), c, "add_constant");
    Tensor out = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += c[i];
    }
    const auto ix = x.id();
    return x.tape().push(std::move(out), {x},
                         [ix](Tape& t, const Tensor& g) { accumulate(t.adjoint(ix), g); }, "add_constant");
}

Var add_scaled_noise(Var x, Var log_scales, std::size_t index, const Tensor& noise)
{
    same_tape(x, log_scales, "add_scaled_noise");
    require_same_shape(x.value(), noise, "add_scaled_noise");
    if (index >= log_scales.value().size()) {
        throw ShapeError("add_scaled_noise: scale index " + std::to_string(index) + " out of range");
    }
    const double s = std::exp(log_scales.value()[index]);
    Tensor out = x.value();
    if (s != 0.0) { // a zero scale leaves x untouched bit for bit, including signed zeros
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] += s * noise[i];
        }
    }
    const auto ix = x.id(), il = log_scales.id();
    return x.tape().push(std::move(out), {x, log_scales},
                         [ix, il, index, s, noise](Tape& t, const Tensor& g) {
                             if (t.requires_grad(ix)) {
                                 accumulate(t.adjoint(ix), g);
                             }
                             if (t.requires_grad(il)) {
                                 // d/d(log s) of s * <g, noise>
                                 t.adjoint(il)[index] += s * kernels::active().dot(g.ptr(), noise.ptr(), g.size());
                             }
                         },
                         "add_scaled_noise");
}

Var layer_norm(Var x, Var gain, Var bias, double eps)
{
    same_tape(x, gain, "layer_norm");
    same_tape(x, bias, "layer_norm");
    const Tensor& xv = x.value();
    require_rank2(xv, "layer_norm");
    const std::size_t m = xv.dim(0), n = xv.dim(1);
    if (gain.value().size() != n || bias.value().size() != n) {
        throw ShapeError("layer_norm: gain/bias width does not match " + shape_string(xv.shape()));
    }
    const Tensor& gain_v = gain.value();
    const Tensor& bias_v = bias.value();
    Tensor out({m, n});
    Tensor xhat({m, n});
    std::vector<double> inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double* xi = xv.ptr() + i * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            mu += xi[j];
        }
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            var += (xi[j] - mu) * (xi[j] - mu);
        }
        var /= static_cast<double>(n);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (xi[j] - mu) * inv_std[i];
            xhat[i * n + j] = h;
            out[i * n + j] = h * gain_v[j] + bias_v[j];
        }
    }
    const auto ix = x.id(), ig = gain.id(), ib = bias.id();
    return x.tape().push(
        std::move(out), {x, gain, bias},
        [ix, ig, ib, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, const Tensor& g) {
            const Tensor& gv = t.value(ig);
            if (t.requires_grad(ig)) {
                Tensor& dg = t.adjoint(ig);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        dg[j] += g[i * n + j] * xhat[i * n + j];
                    }
                }
            }
            if (t.requires_grad(ib)) {
                Tensor& db = t.adjoint(ib);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        db[j] += g[i * n + j];
                    }
                }
            }
            if (t.requires_grad(ix)) {
                Tensor& dx = t.adjoint(ix);
                const double inv_n = 1.0 / static_cast<double>(n);
                for (std::size_t i = 0; i < m; ++i) {
                    double mean_d = 0.0, mean_dh = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double d = g[i * n + j] * gv[j];
                        mean_d += d;
                        mean_dh += d * xhat[i * n + j];
                    }
                    mean_d *= inv_n;
                    mean_dh *= inv_n;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double d = g[i * n + j] * gv[j];
                        dx[i * n + j] += inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dh);
                    }
                }
            }
        },
        "layer_norm");
}

Var gelu(Var x)
{
    constexpr double c = 0.7978845608028654; // sqrt(2/pi)
    constexpr double a = 0.044715;
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    std::vector<double> tanh_u(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double v = xv[i];
        tanh_u[i] = std::tanh(c * (v + a * v * v * v));
        out[i] = 0.5 * v * (1.0 + tanh_u[i]);
    }
    const auto ix = x.id();
    if (!x.tape().recording()) {
        tanh_u.clear();
    }
    return x.tape().push(std::move(out), {x},
                         [ix, tanh_u = std::move(tanh_u)](Tape& t, const Tensor& g) {
                             const Tensor& xv = t.value(ix);
                             Tensor& dx = t.adjoint(ix);
                             for (std::size_t i = 0; i < xv.size(); ++i) {
                                 const double v = xv[i];
                                 const double th = tanh_u[i];
                                 const double du = c * (1.0 + 3.0 * a * v * v);
                                 const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
                                 dx[i] += g[i] * d;
                             }
                         },
                         "gelu");
}

Var log(Var x)
{
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        out[i] = std::log(xv[i]);
    }
    const auto ix = x.id();
    return x.tape().push(std::move(out), {x},
                         [ix](Tape& t, const Tensor& g) {
                             const Tensor& xv = t.value(ix);
                             Tensor& dx = t.adjoint(ix);
                             for (std::size_t i = 0; i < xv.size(); ++i) {
                                 dx[i] += g[i] / xv[i];
                             }
                         },
                         "log");
}

Var exp(Var x)
{
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        out[i] = std::exp(xv[i]);
    }
    const auto ix = x.id();
    Tensor kept = out;
    return x.tape().push(std::move(out), {x},
                         [ix, y = std::move(kept)](Tape& t, const Tensor& g) {
                             Tensor& dx = t.adjoint(ix);
                             for (std::size_t i = 0; i < y.size(); ++i) {
                                 dx[i] += g[i] * y[i];
                             }
                         },
                         "exp");
}

Var embedding(Var table, std::span<const int> ids)
{
    const Tensor& tv = table.value();
    require_rank2(tv, "embedding");
    const std::size_t vocab = tv.dim(0), d = tv.dim(1);
    Tensor out({ids.size(), d});
    std::vector<std::size_t> rows(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw ShapeError("embedding: token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                             std::to_string(vocab));
        }
        rows[i] = static_cast<std::size_t>(ids[i]);
        std::copy_n(tv.ptr() + rows[i] * d, d, out.ptr() + i * d);
    }
    const auto it = table.id();
    return table.tape().push(std::move(out), {table},
                             [it, d, rows = std::move(rows)](Tape& t, const Tensor& g) {
                                 Tensor& dt = t.adjoint(it);
                                 for (std::size_t i = 0; i < rows.size(); ++i) {
                                     for (std::size_t j = 0; j < d; ++j) {
                                         dt[rows[i] * d + j] += g[i * d + j];
                                     }
                                 }
                             },
                             "embedding");
}

Var gather_rows(Var x, std::span<const std::size_t> rows)
{
    const Tensor& xv = x.value();
    require_rank2(xv, "gather_rows");
    const std::size_t m = xv.dim(0), n = xv.dim(1);
    Tensor out({rows.size(), n});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= m) {
            throw ShapeError("gather_rows: row " + std::to_string(rows[i]) + " of " + std::to_string(m));
        }
        std::copy_n(xv.ptr() + rows[i] * n, n, out.ptr() + i * n);
    }
    const auto ix = x.id();
    return x.tape().push(std::move(out), {x},
                         [ix, n, rows = std::vector<std::size_t>(rows.begin(), rows.end())](Tape& t,
                                                                                           const Tensor& g) {
                             Tensor& dx = t.adjoint(ix);
                             for (std::size_t i = 0; i < rows.size(); ++i) {
                                 for (std::size_t j = 0; j < n; ++j) {
                                     dx[rows[i] * n + j] += g[i * n + j];
                                 }
                             }
                         },
                         "gather_rows");
}

Var concat_rows(std::span<const Var> parts)
{
    if (parts.empty()) {
        throw ShapeError("concat_rows: no inputs");
    }
    const std::size_t n = parts[0].value().cols();
    std::size_t m = 0;
    std::vector<std::uint32_t> ids;
    std::vector<std::size_t> offsets;
    for (const Var& p : parts) {
        require_rank2(p.value(), "concat_rows");
        same_tape(parts[0], p, "concat_rows");
        if (p.value().dim(1) != n) {
            throw ShapeError("concat_rows: width mismatch " + shape_string(p.shape()));
        }
        ids.push_back(p.id());
        offsets.push_back(m);
        m += p.value().dim(0);
    }
    Tensor out({m, n});
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& pv = parts[k].value();
        std::copy_n(pv.ptr(), pv.size(), out.ptr() + offsets[k] * n);
    }
    return parts[0].tape().push(std::move(out), parts,
                                [ids = std::move(ids), offsets = std::move(offsets), n](Tape& t, const Tensor& g) {
                                    for (std::size_t k = 0; k < ids.size(); ++k) {
                                        if (!t.requires_grad(ids[k])) {
                                            continue;
                                        }
                                        Tensor& d = t.adjoint(ids[k]);
                                        const double* src = g.ptr() + offsets[k] * n;
                                        for (std::size_t i = 0; i < d.size(); ++i) {
                                            d[i] += src[i];
                                        }
                                    }
                                },
                                "concat_rows");
}

namespace {

// Row-wise max-shifted log-sum-exp.
double row_lse(const double* x, std::size_t n)
{
    double mx = x[0];
    for (std::size_t j = 1; j < n; ++j) {
        mx = std::max(mx, x[j]);
    }
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        s += std::exp(x[j] - mx);
    }
    return mx + std::log(s);
}

} // namespace

Var softmax_rows(Var x)
{
    const Tensor& xv = x.value();
    require_rank2(xv, "softmax_rows");
    const std::size_t m = xv.dim(0), n = xv.dim(1);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double lse = row_lse(xv.ptr() + i * n, n);
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = std::exp(xv[i * n + j] - lse);
        }
    }
    const auto ix = x.id();
    Tensor kept = out;
    return x.tape().push(std::move(out), {x},
                         [ix, m, n, p = std::move(kept)](Tape& t, const Tensor& g) {
                             Tensor& dx = t.adjoint(ix);
                             for (std::size_t i = 0; i < m; ++i) {
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < n; ++j) {
                                     dot += g[i * n + j] * p[i * n + j];
                                 }
                                 for (std::size_t j = 0; j < n; ++j) {
                                     dx[i * n + j] += p[i * n + j] * (g[i * n + j] - dot);
                                 }
                             }
                         },
                         "softmax_rows");
}

Var log_softmax_rows(Var x)
{
    const Tensor& xv = x.value();
    require_rank2(xv, "log_softmax_rows");
    const std::size_t m = xv.dim(0), n = xv.dim(1);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double lse = row_lse(xv.ptr() + i * n, n);
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = xv[i * n + j] - lse;
        }
    }
    const auto ix = x.id();
    Tensor kept = out;
    return x.tape().push(std::move(out), {x},
                         [ix, m, n, ls = std::move(kept)](Tape& t, const Tensor& g) {
                             Tensor& dx = t.adjoint(ix);
                             for (std::size_t i = 0; i < m; ++i) {
                                 double gs = 0.0;
                                 for (std::size_t j = 0; j < n; ++j) {
                                     gs += g[i * n + j];
                                 }
                                 for (std::size_t j = 0; j < n; ++j) {
                                     dx[i * n + j] += g[i * n + j] - std::exp(ls[i * n + j]) * gs;
                                 }
                             }
                         },
                         "log_softmax_rows");
}

Var logsumexp_rows(Var x)
{
    const Tensor& xv = x.value();
    require_rank2(xv, "logsumexp_rows");
    const std::size_t m = xv.dim(0), n = xv.dim(1);
    Tensor out({m, 1});
    for (std::size_t i = 0; i < m; ++i) {
        out[i] = row_lse(xv.ptr() + i * n, n);
    }
    const auto ix = x.id();
    Tensor kept = out;
    return x.tape().push(std::move(out), {x},
                         [ix, m, n, lse = std::move(kept)](Tape& t, const Tensor& g) {
                             const Tensor& xv = t.value(ix);
                             Tensor& dx = t.adjoint(ix);
                             for (std::size_t i = 0; i < m; ++i) {
                                 for (std::size_t j = 0; j < n; ++j) {
                                     dx[i * n + j] += g[i] * std::exp(xv[i * n + j] - lse[i]);
                                 }
                             }
                         },
                         "logsumexp_rows");
}

Var causal_self_attention(Var qkv, std::size_t batch, std::size_t seq_len, std::size_t heads)
{
    const Tensor& in = qkv.value();
    require_rank2(in, "causal_self_attention");
    if (in.dim(0) != batch * seq_len || in.dim(1) % 3 != 0 || heads == 0 || (in.dim(1) / 3) % heads != 0) {
        throw ShapeError("causal_self_attention: qkv " + shape_string(in.shape()) + " for batch " +
                         std::to_string(batch) + ", length " + std::to_string(seq_len) + ", heads " +
                         std::to_string(heads));
    }
    const std::size_t d = in.dim(1) / 3, hd = d / heads, w = 3 * d;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    const auto& kt = kernels::active();
    Tensor out({batch * seq_len, d});
    // Attention weights per (sequence, head, query): seq_len entries, lower triangle used.
    Tensor probs({batch * heads * seq_len * seq_len});
    for (std::size_t b = 0; b < batch; ++b) {
        const double* base = in.ptr() + b * seq_len * w;
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t tq = 0; tq < seq_len; ++tq) {
                double* p = probs.ptr() + ((b * heads + h) * seq_len + tq) * seq_len;
                const double* q = base + tq * w + h * hd;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t tk = 0; tk <= tq; ++tk) {
                    p[tk] = kt.dot(q, base + tk * w + d + h * hd, hd) * inv_sqrt;
                    mx = std::max(mx, p[tk]);
                }
                double s = 0.0;
                for (std::size_t tk = 0; tk <= tq; ++tk) {
                    p[tk] = std::exp(p[tk] - mx);
                    s += p[tk];
                }
                double* o = out.ptr() + (b * seq_len + tq) * d + h * hd;
                for (std::size_t tk = 0; tk <= tq; ++tk) {
                    p[tk] /= s;
                    kt.axpy(p[tk], base + tk * w + 2 * d + h * hd, o, hd);
                }
            }
        }
    }
    const auto iq = qkv.id();
    return qkv.tape().push(
        std::move(out), {qkv},
        [iq, batch, seq_len, heads, d, hd, w, inv_sqrt, probs = std::move(probs)](Tape& t, const Tensor& g) {
            const auto& kt = kernels::active();
            const Tensor& in = t.value(iq);
            Tensor& din = t.adjoint(iq);
            std::vector<double> dp(seq_len);
            for (std::size_t b = 0; b < batch; ++b) {
                const double* base = in.ptr() + b * seq_len * w;
                double* dbase = din.ptr() + b * seq_len * w;
                for (std::size_t h = 0; h < heads; ++h) {
                    for (std::size_t tq = 0; tq < seq_len; ++tq) {
                        const double* p = probs.ptr() + ((b * heads + h) * seq_len + tq) * seq_len;
                        const double* go = g.ptr() + (b * seq_len + tq) * d + h * hd;
                        double pdp = 0.0;
                        for (std::size_t tk = 0; tk <= tq; ++tk) {
                            dp[tk] = kt.dot(go, base + tk * w + 2 * d + h * hd, hd);
                            pdp += p[tk] * dp[tk];
                            kt.axpy(p[tk], go, dbase + tk * w + 2 * d + h * hd, hd);
                        }
                        const double* q = base + tq * w + h * hd;
                        double* dq = dbase + tq * w + h * hd;
                        for (std::size_t tk = 0; tk <= tq; ++tk) {
                            const double ds = p[tk] * (dp[tk] - pdp) * inv_sqrt;
                            kt.axpy(ds, base + tk * w + d + h * hd, dq, hd);
                            kt.axpy(ds, q, dbase + tk * w + d + h * hd, hd);
                        }
                    }
                }
            }
        },
        "causal_self_attention");
}

Var sum(Var x)
{
    double s = 0.0;
    for (double v : x.value().data()) {
        s += v;
    }
    const auto ix = x.id();
    return x.tape().push(Tensor::scalar(s), {x},
                         [ix](Tape& t, const Tensor& g) {
                             for (double& v : t.adjoint(ix).data()) {
                                 v += g[0];
                             }
                         },
                         "sum");
}

Var mean(Var x)
{
    const std::size_t n = x.value().size();
    if (n == 0) {
        throw ShapeError("mean of an empty tensor");
    }
    return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var weighted_sum(Var x, const Tensor& weights)
{
    require_same_shape(x.value(), weights, "weighted_sum");
    double s = 0.0;
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < weights.size(); ++i) {
        s += weights[i] * xv[i];
    }
    const auto ix = x.id();
    return x.tape().push(Tensor::scalar(s), {x},
                         [ix, weights](Tape& t, const Tensor& g) {
                             kernels::active().axpy(g[0], weights.ptr(), t.adjoint(ix).ptr(), weights.size());
                         },
                         "weighted_sum");
}

double round_mantissa(double x, int bits)
{
    if (bits < 4 || bits > 52) {
        throw std::invalid_argument("round_mantissa: bits must lie in [4, 52], got " + std::to_string(bits));
    }
    if (bits == 52 || x == 0.0 || !std::isfinite(x)) {
        return x;
    }
    int e = 0;
    const double m = std::frexp(x, &e); // |m| in [0.5, 1): 53 significant bits
    const double scaled = std::ldexp(m, bits + 1);
    return std::ldexp(std::nearbyint(scaled), e - bits - 1);
}

Var round_mantissa(Var x, int bits)
{
    Tensor out = x.value();
    for (double& v : out.data()) {
        v = round_mantissa(v, bits);
    }
    const auto ix = x.id();
    return x.tape().push(std::move(out), {x},
                         [ix](Tape& t, const Tensor& g) { accumulate(t.adjoint(ix), g); }, "round_mantissa");
}

} // namespace alp::num
