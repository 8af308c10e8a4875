// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "rbwp/diff/ops.hpp"
#include "rbwp/io/snapshot.hpp"

namespace rbwp::backbone {

using diff::Tape;
using diff::Var;

struct EncoderConfig {
  std::size_t layers = 5;
  std::size_t dim = 32;
  std::size_t heads = 4;
  /// Sequence length including the class token.
  std::size_t tokens = 17;
  std::size_t mlp_dim = 64;

  std::size_t patches() const noexcept { return tokens - 1; }
  /// Throws std::invalid_argument on inconsistent sizes.
  void validate() const;
};

/// Key and value halves of a prompt, each (L_p / 2) x D.
struct PrefixPair {
  Array keys;
  Array values;

  /// First half of the rows becomes keys, second half values. Rejects odd
  /// row counts.
  static PrefixPair split(const Array& prompt);
  std::size_t length() const { return keys.rows(); }
};

/// Per-layer prefixes for one forward pass. Empty entries mean no insertion.
using LayerPrefixes = std::vector<std::optional<diff::PrefixRows>>;

struct EncoderLayer {
  Array ln1_gamma, ln1_beta;
  Array wq, wk, wv, wo, bo;
  Array ln2_gamma, ln2_beta;
  Array w_fc1, b_fc1, w_fc2, b_fc2;
};

/// Randomly initialized, then frozen, pre-LN transformer encoder. Weights
/// enter every tape as constants, so no gradient ever reaches them.
class Encoder {
 public:
  static Encoder random(const EncoderConfig& config, std::uint64_t seed);
  static Encoder from_snapshot(const EncoderConfig& config,
                               std::span<const io::NamedArray> arrays);

  const EncoderConfig& config() const noexcept { return config_; }
  const EncoderLayer& layer(std::size_t l) const { return layers_.at(l); }
  std::vector<io::NamedArray> snapshot() const;
  std::size_t parameter_count() const;

  /// Token matrix (batch * tokens) x D: class token, then patches, plus
  /// positional embeddings. Each input is patches x D.
  Array embed(std::span<const Array> inputs) const;

  /// Attention sub-block of layer `l` on already-normalized tokens:
  /// projections, multi-head attention with keys/values extended by the
  /// prefix, output projection.
  Var prefix_attention(Tape& tape, std::size_t l, Var normed,
                       const std::optional<diff::PrefixRows>& prefix,
                       std::size_t batch, std::vector<Array>* probs = nullptr) const;

  /// Class-token features (batch x D) after the final layer norm.
  /// `prefixes` must hold one entry per layer. When `probs` is given it
  /// receives, per layer, the attention weights of every (sample, head).
  Var encode(Tape& tape, std::span<const Array> inputs, const LayerPrefixes& prefixes,
             std::vector<std::vector<Array>>* probs = nullptr) const;

  /// Prompt-free class-token feature used to match inputs to tasks.
  Array query_feature(const Array& input) const;
  /// Row i is query_feature(inputs[i]).
  Array query_features(std::span<const Array> inputs) const;

 private:
  explicit Encoder(EncoderConfig config) : config_(config) {}

  EncoderConfig config_;
  Array class_token_;  // 1 x D
  Array positions_;    // tokens x D
  std::vector<EncoderLayer> layers_;
  Array final_gamma_, final_beta_;
};

}  // namespace rbwp::backbone
