// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "../support/oracle.hpp"
#include "rbwp/backbone/forward.hpp"
#include "rbwp/io/rng.hpp"

using namespace rbwp;
using namespace rbwp::backbone;
using diff::Tape;

namespace {

Array random_input(const EncoderConfig& cfg, Rng& rng) {
  Array a({cfg.patches(), cfg.dim});
  for (auto& v : a.values()) v = rng.normal();
  return a;
}

Array random_prompt(std::size_t rows, std::size_t d, Rng& rng) {
  Array a({rows, d});
  for (auto& v : a.values()) v = 0.5 * rng.normal();
  return a;
}

EncoderConfig toy_config() {
  EncoderConfig cfg;
  cfg.layers = 2;
  cfg.dim = 4;
  cfg.heads = 2;
  cfg.tokens = 3;
  cfg.mlp_dim = 6;
  return cfg;
}

}  // namespace

TEST_CASE("encoder config validation") {
  EncoderConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.heads = 5;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.tokens = 1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.layers = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("prefix split halves the prompt rows") {
  Rng rng(1);
  const Array p = random_prompt(20, 32, rng);
  const PrefixPair pair = PrefixPair::split(p);
  CHECK(pair.keys.shape() == Shape{10, 32});
  CHECK(pair.values.shape() == Shape{10, 32});
  CHECK(pair.keys.at(0, 0) == p.at(0, 0));
  CHECK(pair.values.at(0, 0) == p.at(10, 0));
  CHECK_THROWS_AS(PrefixPair::split(random_prompt(3, 4, rng)), ShapeError);
}

TEST_CASE("zero prefix row contributes a zero logit and a zero value") {
  Tape t;
  Var x = t.constant(Array::matrix(2, 2, {1, 0, 0, 1}));
  diff::PrefixRows zero{t.constant(Array({1, 2}, 0.0)), t.constant(Array({1, 2}, 0.0)), 1};
  std::vector<Array> probs;
  Var o = diff::prefix_attention(x, x, x, zero, {1, 2, 1}, &probs);
  // Query row 0 = [1, 0]: logits [0 (prefix), 1/sqrt2, 0].
  const double e = std::exp(1.0 / std::sqrt(2.0)), z = 2.0 + e;
  CHECK(probs[0].at(0, 0) == doctest::Approx(1.0 / z).epsilon(1e-14));
  CHECK(probs[0].at(0, 1) == doctest::Approx(e / z).epsilon(1e-14));
  CHECK(o.value().at(0, 0) == doctest::Approx(e / z).epsilon(1e-14));
  CHECK(o.value().at(0, 1) == doctest::Approx(1.0 / z).epsilon(1e-14));
  CHECK(o.value().at(1, 0) == doctest::Approx(1.0 / z).epsilon(1e-14));
  CHECK(o.value().at(1, 1) == doctest::Approx(e / z).epsilon(1e-14));
}

TEST_CASE("encoder attention rows sum to one with and without prefixes") {
  Rng rng(2);
  const EncoderConfig cfg;
  const Encoder enc = Encoder::random(cfg, 7);
  std::vector<Array> inputs{random_input(cfg, rng), random_input(cfg, rng)};
  Tape t;
  LayerPrefixes prefixes(cfg.layers);
  prefixes[1] = constant_prefix(t, PrefixPair::split(random_prompt(20, cfg.dim, rng)));
  std::vector<std::vector<Array>> probs;
  enc.encode(t, inputs, prefixes, &probs);
  REQUIRE(probs.size() == cfg.layers);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    REQUIRE(probs[l].size() == inputs.size() * cfg.heads);
    CHECK(probs[l][0].cols() == (l == 1 ? 10 + cfg.tokens : cfg.tokens));
    for (const auto& m : probs[l])
      for (std::size_t r = 0; r < m.rows(); ++r) {
        double s = 0;
        for (double v : m.row(r)) s += v;
        CHECK(std::abs(s - 1.0) < 1e-6);
      }
  }
}

TEST_CASE("prefix width must match the embedding dimension") {
  const EncoderConfig cfg = toy_config();
  const Encoder enc = Encoder::random(cfg, 1);
  Rng rng(3);
  Tape t;
  LayerPrefixes prefixes(cfg.layers);
  prefixes[0] = constant_prefix(t, PrefixPair::split(random_prompt(2, 5, rng)));
  const Array in = random_input(cfg, rng);
  CHECK_THROWS_AS(enc.encode(t, std::span(&in, 1), prefixes), ShapeError);
}

TEST_CASE("toy encoder matches a straight-line re-computation") {
  const EncoderConfig cfg = toy_config();
  const Encoder enc = Encoder::random(cfg, 99);
  Rng rng(4);
  const Array input = random_input(cfg, rng);
  const Array prompt = random_prompt(4, cfg.dim, rng);
  const PrefixPair pair = PrefixPair::split(prompt);

  Tape t;
  LayerPrefixes prefixes(cfg.layers);
  prefixes[1] = constant_prefix(t, pair);
  const Array feat = enc.encode(t, std::span(&input, 1), prefixes).value();

  std::vector<std::optional<oracle::Prefix>> op(cfg.layers);
  op[1] = oracle::Prefix{oracle::from(pair.keys), oracle::from(pair.values)};
  const auto expect = oracle::encode(enc.snapshot(), cfg.layers, cfg.heads,
                                     oracle::from(input), op);
  for (std::size_t j = 0; j < cfg.dim; ++j)
    CHECK(feat[j] == doctest::Approx(expect[j]).epsilon(1e-12));

  const auto bare = oracle::encode(enc.snapshot(), cfg.layers, cfg.heads, oracle::from(input),
                                   std::vector<std::optional<oracle::Prefix>>(cfg.layers));
  const Array q = enc.query_feature(input);
  CHECK(q.size() == cfg.dim);
  for (std::size_t j = 0; j < cfg.dim; ++j)
    CHECK(q[j] == doctest::Approx(bare[j]).epsilon(1e-12));

  // Logits through the classifier against the same oracle.
  Classifier clf(cfg.dim);
  clf.add_block(3, rng);
  Tape t2;
  LayerPrefixes p2(cfg.layers);
  p2[1] = constant_prefix(t2, pair);
  const Array logits = forward(t2, enc, clf, std::span(&input, 1), p2).value();
  REQUIRE(logits.shape() == Shape{1, 3});
  for (std::size_t c = 0; c < 3; ++c) {
    double z = clf.bias(0).value[c];
    for (std::size_t j = 0; j < cfg.dim; ++j) z += clf.weights(0).value.at(c, j) * expect[j];
    CHECK(logits[c] == doctest::Approx(z).epsilon(1e-12));
  }
}

TEST_CASE("forward without prompts equals the query feature pass") {
  const EncoderConfig cfg;
  const Encoder enc = Encoder::random(cfg, 5);
  Rng rng(6);
  std::vector<Array> inputs{random_input(cfg, rng), random_input(cfg, rng)};
  Tape t;
  const Array feats = enc.encode(t, inputs, LayerPrefixes(cfg.layers)).value();
  const Array q = enc.query_features(inputs);
  CHECK(feats.bitwise_equal(q));
  const Array q0 = enc.query_feature(inputs[0]);
  for (std::size_t j = 0; j < cfg.dim; ++j) CHECK(q0[j] == q.at(0, j));
}

TEST_CASE("forward is deterministic and rejects an empty classifier") {
  const EncoderConfig cfg;
  const Encoder enc = Encoder::random(cfg, 5);
  Rng rng(8);
  const Array in = random_input(cfg, rng);
  const PrefixPair pair = PrefixPair::split(random_prompt(20, cfg.dim, rng));
  Classifier clf(cfg.dim);
  {
    Tape t;
    CHECK_THROWS_AS(forward(t, enc, clf, std::span(&in, 1), LayerPrefixes(cfg.layers)),
                    std::invalid_argument);
  }
  clf.add_block(2, rng);
  auto run = [&] {
    Tape t;
    LayerPrefixes p(cfg.layers);
    p[3] = constant_prefix(t, pair);
    return forward(t, enc, clf, std::span(&in, 1), p).value();
  };
  CHECK(run().bitwise_equal(run()));
}

TEST_CASE("encoder receives no gradient and snapshots round trip") {
  const EncoderConfig cfg = toy_config();
  const Encoder enc = Encoder::random(cfg, 12);
  const auto before = enc.snapshot();
  Rng rng(13);
  const Array in = random_input(cfg, rng);
  diff::Parameter prompt{"prompt", random_prompt(2, cfg.dim, rng)};
  Tape t;
  Var pv = t.parameter(prompt);
  LayerPrefixes p(cfg.layers);
  p[0] = diff::PrefixRows{diff::slice_rows(pv, 0, 1), diff::slice_rows(pv, 1, 2), 1};
  auto g = t.backward(diff::sum(enc.encode(t, std::span(&in, 1), p)));
  CHECK(g.size() == 1);
  CHECK(g.contains(prompt));
  const auto after = enc.snapshot();
  for (std::size_t i = 0; i < before.size(); ++i)
    CHECK(before[i].value.bitwise_equal(after[i].value));

  const Encoder copy = Encoder::from_snapshot(cfg, after);
  CHECK(copy.query_feature(in).bitwise_equal(enc.query_feature(in)));
  CHECK(enc.parameter_count() > 0);
  auto broken = after;
  broken.pop_back();
  CHECK_THROWS(Encoder::from_snapshot(cfg, broken));
}

TEST_CASE("classifier grows by blocks and freezes completed ones") {
  Rng rng(10);
  Classifier clf(4);
  clf.add_block(2, rng);
  clf.add_block(3, rng);
  CHECK(clf.class_count() == 5);
  CHECK(clf.block_offset(1) == 2);
  clf.freeze_block(0);
  CHECK(clf.frozen_rows() == std::set<std::size_t>{0, 1});
  CHECK_THROWS_AS(clf.weights(0), std::logic_error);
  Tape t;
  Var f = t.constant(Array({1, 4}, 1.0));
  CHECK_THROWS_AS(clf.block_logits(t, f, 0), std::logic_error);
  CHECK(clf.block_logits(t, f, 1).shape() == Shape{1, 3});
  CHECK(clf.logits(t, f).shape() == Shape{1, 5});
}
