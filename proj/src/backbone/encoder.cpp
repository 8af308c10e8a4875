// SPDX-License-Identifier: Apache-2.0
#include "rbwp/backbone/encoder.hpp"

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "rbwp/io/rng.hpp"

namespace rbwp::backbone {

namespace {

Array uniform(Shape shape, double bound, Rng& rng) {
  Array a(std::move(shape));
  for (auto& v : a.values()) v = rng.uniform(-bound, bound);
  return a;
}

Array normal(Shape shape, double sd, Rng& rng) {
  Array a(std::move(shape));
  for (auto& v : a.values()) v = sd * rng.normal();
  return a;
}

}  // namespace

void EncoderConfig::validate() const {
  if (layers < 1) throw std::invalid_argument("encoder needs at least one layer");
  if (tokens < 2)
    throw std::invalid_argument("encoder needs the class token plus at least one patch");
  if (heads == 0 || dim % heads != 0)
    throw std::invalid_argument("embedding dimension " + std::to_string(dim) +
                                " is not divisible by " + std::to_string(heads) +
                                " heads");
  if (mlp_dim == 0) throw std::invalid_argument("mlp width must be positive");
}

PrefixPair PrefixPair::split(const Array& prompt) {
  const std::size_t rows = prompt.rows(), d = prompt.cols();
  if (rows % 2 != 0)
    throw ShapeError("prompt length must be even, got " + std::to_string(rows));
  const std::size_t half = rows / 2;
  const auto& s = prompt.storage();
  const auto mid = s.begin() + static_cast<std::ptrdiff_t>(half * d);
  return {Array({half, d}, std::vector<double>(s.begin(), mid)),
          Array({half, d}, std::vector<double>(mid, s.end()))};
}

Encoder Encoder::random(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  Encoder enc(config);
  Rng rng(seed);
  const std::size_t d = config.dim, m = config.mlp_dim;
  const double bd = 1.0 / std::sqrt(static_cast<double>(d));
  const double bm = 1.0 / std::sqrt(static_cast<double>(m));
  enc.class_token_ = normal({1, d}, 0.02, rng);
  enc.positions_ = normal({config.tokens, d}, 0.02, rng);
  for (std::size_t l = 0; l < config.layers; ++l) {
    EncoderLayer L;
    L.ln1_gamma = Array({d}, 1.0);
    L.ln1_beta = Array({d}, 0.0);
    L.wq = uniform({d, d}, bd, rng);
    L.wk = uniform({d, d}, bd, rng);
    L.wv = uniform({d, d}, bd, rng);
    L.wo = uniform({d, d}, bd, rng);
    L.bo = Array({d}, 0.0);
    L.ln2_gamma = Array({d}, 1.0);
    L.ln2_beta = Array({d}, 0.0);
    L.w_fc1 = uniform({d, m}, bd, rng);
    L.b_fc1 = Array({m}, 0.0);
    L.w_fc2 = uniform({m, d}, bm, rng);
    L.b_fc2 = Array({d}, 0.0);
    enc.layers_.push_back(std::move(L));
  }
  enc.final_gamma_ = Array({d}, 1.0);
  enc.final_beta_ = Array({d}, 0.0);
  return enc;
}

std::vector<io::NamedArray> Encoder::snapshot() const {
  std::vector<io::NamedArray> out{{"class_token", class_token_},
                                  {"positions", positions_}};
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& L = layers_[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    for (auto [name, arr] : {std::pair{"ln1_gamma", &L.ln1_gamma},
                             {"ln1_beta", &L.ln1_beta},
                             {"wq", &L.wq},
                             {"wk", &L.wk},
                             {"wv", &L.wv},
                             {"wo", &L.wo},
                             {"bo", &L.bo},
                             {"ln2_gamma", &L.ln2_gamma},
                             {"ln2_beta", &L.ln2_beta},
                             {"w_fc1", &L.w_fc1},
                             {"b_fc1", &L.b_fc1},
                             {"w_fc2", &L.w_fc2},
                             {"b_fc2", &L.b_fc2}})
      out.push_back({p + name, *arr});
  }
  out.push_back({"final_gamma", final_gamma_});
  out.push_back({"final_beta", final_beta_});
  return out;
}

Encoder Encoder::from_snapshot(const EncoderConfig& config,
                               std::span<const io::NamedArray> arrays) {
  config.validate();
  std::map<std::string, const Array*> by_name;
  for (const auto& a : arrays) by_name[a.name] = &a.value;
  auto take = [&](const std::string& name, const Shape& shape) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw io::SnapshotError("encoder snapshot lacks '" + name + "'");
    if (it->second->shape() != shape)
      throw ShapeError::mismatch(name.c_str(), it->second->shape(), shape);
    return *it->second;
  };
  const std::size_t d = config.dim, m = config.mlp_dim;
  Encoder enc(config);
  enc.class_token_ = take("class_token", {1, d});
  enc.positions_ = take("positions", {config.tokens, d});
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    EncoderLayer L;
    L.ln1_gamma = take(p + "ln1_gamma", {d});
    L.ln1_beta = take(p + "ln1_beta", {d});
    L.wq = take(p + "wq", {d, d});
    L.wk = take(p + "wk", {d, d});
    L.wv = take(p + "wv", {d, d});
    L.wo = take(p + "wo", {d, d});
    L.bo = take(p + "bo", {d});
    L.ln2_gamma = take(p + "ln2_gamma", {d});
    L.ln2_beta = take(p + "ln2_beta", {d});
    L.w_fc1 = take(p + "w_fc1", {d, m});
    L.b_fc1 = take(p + "b_fc1", {m});
    L.w_fc2 = take(p + "w_fc2", {m, d});
    L.b_fc2 = take(p + "b_fc2", {d});
    enc.layers_.push_back(std::move(L));
  }
  enc.final_gamma_ = take("final_gamma", {d});
  enc.final_beta_ = take("final_beta", {d});
  return enc;
}

std::size_t Encoder::parameter_count() const {
  std::size_t n = 0;
  for (const auto& a : snapshot()) n += a.value.size();
  return n;
}

Array Encoder::embed(std::span<const Array> inputs) const {
  const std::size_t n = config_.tokens, d = config_.dim;
  Array x({inputs.size() * n, d});
  for (std::size_t b = 0; b < inputs.size(); ++b) {
    const Array& in = inputs[b];
    if (in.rank() != 2 || in.rows() != n - 1 || in.cols() != d)
      throw ShapeError::mismatch("embed", in.shape(), Shape{n - 1, d});
    for (std::size_t j = 0; j < d; ++j)
      x.at(b * n, j) = class_token_.at(0, j) + positions_.at(0, j);
    for (std::size_t i = 1; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j)
        x.at(b * n + i, j) = in.at(i - 1, j) + positions_.at(i, j);
  }
  return x;
}

Var Encoder::prefix_attention(Tape& tape, std::size_t l, Var normed,
                              const std::optional<diff::PrefixRows>& prefix,
                              std::size_t batch, std::vector<Array>* probs) const {
  const auto& L = layers_.at(l);
  if (prefix && prefix->keys.value().cols() != config_.dim)
    throw ShapeError("prefix width " + std::to_string(prefix->keys.value().cols()) +
                     " does not match embedding dimension " +
                     std::to_string(config_.dim));
  Var q = diff::matmul(normed, tape.constant(L.wq));
  Var k = diff::matmul(normed, tape.constant(L.wk));
  Var v = diff::matmul(normed, tape.constant(L.wv));
  const std::size_t tokens = normed.value().rows() / batch;
  Var att = diff::prefix_attention(q, k, v, prefix, {batch, tokens, config_.heads}, probs);
  return diff::add_row(diff::matmul(att, tape.constant(L.wo)), tape.constant(L.bo));
}

Var Encoder::encode(Tape& tape, std::span<const Array> inputs,
                    const LayerPrefixes& prefixes,
                    std::vector<std::vector<Array>>* probs) const {
  if (prefixes.size() != config_.layers)
    throw std::invalid_argument("expected " + std::to_string(config_.layers) +
                                " layer prefixes, got " +
                                std::to_string(prefixes.size()));
  if (inputs.empty()) throw std::invalid_argument("encode: empty batch");
  const std::size_t batch = inputs.size();
  if (probs) probs->assign(config_.layers, {});
  Var x = tape.constant(embed(inputs));
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const auto& L = layers_[l];
    Var h = diff::layer_norm(x, tape.constant(L.ln1_gamma), tape.constant(L.ln1_beta));
    x = x + prefix_attention(tape, l, h, prefixes[l], batch,
                             probs ? &(*probs)[l] : nullptr);
    Var h2 = diff::layer_norm(x, tape.constant(L.ln2_gamma), tape.constant(L.ln2_beta));
    Var hidden = diff::relu(
        diff::add_row(diff::matmul(h2, tape.constant(L.w_fc1)), tape.constant(L.b_fc1)));
    x = x + diff::add_row(diff::matmul(hidden, tape.constant(L.w_fc2)),
                          tape.constant(L.b_fc2));
  }
  std::vector<std::size_t> cls(batch);
  for (std::size_t b = 0; b < batch; ++b) cls[b] = b * config_.tokens;
  Var pooled = diff::gather_rows(x, cls);
  return diff::layer_norm(pooled, tape.constant(final_gamma_), tape.constant(final_beta_));
}

Array Encoder::query_features(std::span<const Array> inputs) const {
  Tape tape(diff::Precision::f64);
  return encode(tape, inputs, LayerPrefixes(config_.layers)).value();
}

Array Encoder::query_feature(const Array& input) const {
  return query_features(std::span<const Array>(&input, 1)).reshaped({config_.dim});
}

}  // namespace rbwp::backbone
