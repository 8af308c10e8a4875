// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "rbwp/diff/gradcheck.hpp"
#include "rbwp/gate/gate.hpp"

using namespace rbwp;
using namespace rbwp::gate;

TEST_CASE("symmetric gate inputs give an even split") {
  GumbelNoise n{{0.3, 0.3}};
  for (double tau : {0.01, 0.5, 1.0, 7.0}) {
    const auto g = gumbel_relax({0.5, 0.5}, n, tau);
    CHECK(g[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(g[1] == doctest::Approx(0.5).epsilon(1e-15));
  }
}

TEST_CASE("relaxed gates sum to one") {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double a = rng.uniform(kAlphaMin, kAlphaMax);
    const auto g = gumbel_relax({a, 1 - a}, GumbelNoise::draw(rng), rng.uniform(0.05, 3.0));
    CHECK(std::abs(g[0] + g[1] - 1.0) < 1e-9);
  }
}

TEST_CASE("low temperature approaches the one-hot argmax") {
  GumbelNoise n{{GumbelNoise::from_uniform(0.3), GumbelNoise::from_uniform(0.6)}};
  const auto g = gumbel_relax({0.9, 0.1}, n, 0.01);
  const double l0 = std::log(0.9) + n.z[0], l1 = std::log(0.1) + n.z[1];
  const std::size_t win = l0 > l1 ? 0 : 1;
  CHECK(g[win] > 1.0 - 1e-6);
  CHECK(g[1 - win] < 1e-6);

  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const double a = rng.uniform(kAlphaMin, kAlphaMax);
    const auto noise = GumbelNoise::draw(rng);
    const double d = (std::log(a) + noise.z[0]) - (std::log(1 - a) + noise.z[1]);
    // A gap d gives max component sigmoid(|d| / tau).
    if (std::abs(d) <= 0.01 * std::log(1e4)) continue;
    const auto gg = gumbel_relax({a, 1 - a}, noise, 0.01);
    CHECK(std::max(gg[0], gg[1]) > 1.0 - 1e-4);
  }
}

TEST_CASE("relaxation rejects a non-positive temperature") {
  CHECK_THROWS_AS(gumbel_relax({0.5, 0.5}, {}, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(gumbel_relax({0.5, 0.5}, {}, -1.0), std::invalid_argument);
  CHECK_THROWS_AS(GateState(3, GateConfig{0.0, 0.6}, 1, 0), std::invalid_argument);
  CHECK_THROWS_AS(GumbelNoise::from_uniform(0.0), std::invalid_argument);
}

TEST_CASE("sparse penalty values") {
  const std::vector<double> full(5, kAlphaMax);
  CHECK(sparse_penalty(full) == doctest::Approx(5 * std::log(1 - 1e-3)));
  CHECK(sparse_penalty(full) > -0.0051);
  const std::vector<double> inv_e(4, std::exp(-1.0));
  CHECK(sparse_penalty(inv_e) == doctest::Approx(-4.0).epsilon(1e-15));
  const std::vector<double> pair{0.5, 0.25};
  CHECK(sparse_penalty(pair) == doctest::Approx(std::log(0.5) + std::log(0.25)).epsilon(1e-15));
  CHECK(sparse_penalty(pair) == doctest::Approx(-2.0794).epsilon(1e-4));

  diff::Tape t;
  diff::Var logits = t.constant(Array({3}, {-50.0, 0.0, 50.0}));
  CHECK(sparse_penalty(logits).value().item() ==
        doctest::Approx(std::log(kAlphaMin) + std::log(0.5) + std::log(kAlphaMax)));
}

TEST_CASE("alpha stays clamped") {
  GateState g(3, {}, 1, 0);
  CHECK(g.alpha(0) == 0.5);
  g.logits().value[0] = 100.0;
  g.logits().value[1] = -100.0;
  CHECK(g.alpha(0) == kAlphaMax);
  CHECK(g.alpha(1) == kAlphaMin);
  CHECK(g.soft_epochs(30) == 18);
  CHECK(g.soft_epochs(0) == 0);
}

TEST_CASE("tape relaxation matches the numeric form and its gradient") {
  Rng rng(3);
  diff::Parameter logits{"logits", Array({3}, {0.4, -1.2, 2.0})};
  std::vector<GumbelNoise> noise;
  for (int l = 0; l < 3; ++l) noise.push_back(GumbelNoise::draw(rng));
  diff::Tape t;
  diff::Var lv = t.parameter(logits);
  for (std::size_t l = 0; l < 3; ++l) {
    const double a = 1.0 / (1.0 + std::exp(-logits.value[l]));
    const auto expect = gumbel_relax({a, 1 - a}, noise[l], 0.7);
    const auto got = relax_layer(lv, l, noise[l], 0.7).value();
    CHECK(got[0] == doctest::Approx(expect[0]).epsilon(1e-14));
    CHECK(got[1] == doctest::Approx(expect[1]).epsilon(1e-14));
  }
  diff::Parameter* params[] = {&logits};
  auto report = diff::grad_check([&](diff::Tape& tt) {
    diff::Var x = tt.parameter(logits);
    diff::Var s = sparse_penalty(x);
    for (std::size_t l = 0; l < 3; ++l)
      s = s + diff::sum(diff::slice_rows(relax_layer(x, l, noise[l], 0.7), kInsert, kInsert + 1));
    return s;
  }, params);
  CHECK(report.max_relative_error < 1e-7);
}

TEST_CASE("mask frequencies follow alpha") {
  for (double a : {kAlphaMax, kAlphaMin, 0.3}) {
    Rng rng(7);
    const std::vector<double> alphas(4, a);
    std::vector<int> hits(4, 0);
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
      const LayerMask m = draw_mask(alphas, rng);
      for (std::size_t l = 0; l < 4; ++l) hits[l] += m.insert[l];
    }
    for (int h : hits) CHECK(std::abs(static_cast<double>(h) / n - a) <= 0.01);
  }
}

TEST_CASE("mask sampling is seeded and written once") {
  GateState a(5, {}, 99, 2), b(5, {}, 99, 2);
  CHECK(a.sample_mask() == b.sample_mask());
  CHECK_THROWS_AS(a.sample_mask(), std::logic_error);
  CHECK(a.mask().has_value());
}

TEST_CASE("layer mask text form") {
  const LayerMask m = LayerMask::parse("01101");
  CHECK(m.selected() == 3);
  CHECK(m.last_selected() == 4u);
  CHECK(m.to_string() == "01101");
  CHECK_FALSE(LayerMask::all(3, false).last_selected().has_value());
  CHECK_THROWS(LayerMask::parse("0x1"));
}
