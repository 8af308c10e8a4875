// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "rbwp/diff/tape.hpp"

namespace rbwp::diff {

inline constexpr double kLayerNormEps = 1e-6;

// Linear algebra and elementwise arithmetic. Binary elementwise ops require
// identical shapes; there is no implicit broadcasting.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

/// x (m x n) plus a length-n bias on every row.
Var add_row(Var x, Var bias);
Var scale(Var a, double factor);
/// Multiplies every element by the single value held in `factor`.
Var scale_by(Var a, Var factor);
Var add_scalar(Var a, double c);

Var relu(Var a);  // derivative at exactly 0 is 0
Var exp(Var a);
Var log(Var a);
Var sigmoid(Var a);
/// Clamps to [lo, hi]; gradient is zero outside the open interval.
Var clamp(Var a, double lo, double hi);

/// Softmax along `axis`, max-subtracted.
Var softmax(Var a, std::size_t axis);
/// Normalizes over the last axis, then applies per-feature scale and shift.
Var layer_norm(Var x, Var gamma, Var beta, double eps = kLayerNormEps);

Var sum(Var a);
Var mean(Var a);
/// Cosine similarity of two equally sized arrays, viewed as flat vectors.
/// Rejects zero-norm inputs.
Var cosine_similarity(Var a, Var b);
/// Mean negative log-likelihood of `labels` under row-wise softmax(logits).
Var cross_entropy(Var logits, std::span<const std::size_t> labels);

Var reshape(Var a, Shape shape);
/// Concatenates along axis 0; trailing dimensions must agree.
Var concat(std::span<const Var> parts);
/// Sub-range [begin, end) along axis 0.
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var gather_rows(Var a, std::span<const std::size_t> rows);
/// Elementwise average of equally shaped arrays.
Var average(std::span<const Var> parts);

/// Per-sample convex mixes: weights (B x T), slices T arrays of (P x D).
/// Output row b*P + r is sum_i weights[b][i] * slices[i][r].
Var blend(Var weights, std::span<const Var> slices);

/// Key/value rows prepended to attention, either shared by the batch
/// (length rows) or per sample (batch * length rows).
struct PrefixRows {
  Var keys;
  Var values;
  std::size_t length = 0;
};

struct AttentionDims {
  std::size_t batch = 1;
  std::size_t tokens = 1;
  std::size_t heads = 1;
};

/// Multi-head scaled dot-product attention over (batch * tokens) x D
/// projected queries, keys, and values. Keys and values of each sample are
/// extended with the prefix rows ahead of the sample's own rows; queries
/// come only from the sample. When `probs` is non-null it receives one
/// tokens x (length + tokens) weight matrix per (sample, head).
Var prefix_attention(Var q, Var k, Var v, const std::optional<PrefixRows>& prefix,
                     AttentionDims dims, std::vector<Array>* probs = nullptr);

}  // namespace rbwp::diff
