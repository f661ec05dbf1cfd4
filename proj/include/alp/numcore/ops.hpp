#pragma once

// Differentiable primitives over Tape variables. Every op validates shapes, checks its
// output for NaN/Inf, and records a backward rule when any input requires a gradient.

#include "alp/numcore/tape.hpp"

#include <cstddef>
#include <span>

namespace alp::num {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double factor);
/// x[m x n] + bias[n] broadcast over rows.
Var add_bias(Var x, Var bias);
/// x + c with c a constant of the same shape.
Var add_constant(Var x, const Tensor& c);
/// x + exp(log_scales[index]) * noise. The pathwise derivative flows into log_scales.
Var add_scaled_noise(Var x, Var log_scales, std::size_t index, const Tensor& noise);

Var layer_norm(Var x, Var gain, Var bias, double eps);
/// Tanh-approximated GELU.
Var gelu(Var x);
Var log(Var x);
Var exp(Var x);

/// Rows of `table` selected by `ids`.
Var embedding(Var table, std::span<const int> ids);
Var gather_rows(Var x, std::span<const std::size_t> rows);
Var concat_rows(std::span<const Var> parts);

Var softmax_rows(Var x);
Var log_softmax_rows(Var x);
Var logsumexp_rows(Var x);

/// Multi-head causal self-attention over `batch` sequences of length `seq_len`.
/// `qkv` is [batch*seq_len x 3*d] holding queries, keys and values side by side.
Var causal_self_attention(Var qkv, std::size_t batch, std::size_t seq_len, std::size_t heads);

Var sum(Var x);
Var mean(Var x);
/// Sum of w * x for a constant weight tensor of the same shape.
Var weighted_sum(Var x, const Tensor& weights);

/// Rounds every element to `bits` explicit mantissa bits (round to nearest, ties to
/// even). The backward rule passes gradients straight through.
Var round_mantissa(Var x, int bits);
double round_mantissa(double x, int bits);

} // namespace alp::num
