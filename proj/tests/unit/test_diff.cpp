// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <Eigen/SVD>

#include <cmath>
#include <numeric>

#include "rbwp/diff/gradcheck.hpp"
#include "rbwp/diff/ops.hpp"
#include "rbwp/io/rng.hpp"

using namespace rbwp;
using namespace rbwp::diff;

namespace {

Array random_array(Shape shape, Rng& rng, double scale = 1.0) {
  Array a(std::move(shape));
  for (auto& v : a.values()) v = scale * rng.normal();
  return a;
}

double eigen_nuclear_norm(const Array& a) {
  Eigen::MatrixXd m(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) m(i, j) = a.at(i, j);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  return svd.singularValues().sum();
}

Array selector(std::size_t d, std::size_t begin, std::size_t width) {
  Array s({d, width}, 0.0);
  for (std::size_t j = 0; j < width; ++j) s.at(begin + j, j) = 1.0;
  return s;
}

// Same attention assembled from primitive ops only.
Var composed_attention(Var q, Var k, Var v, Var pk, Var pv, std::size_t prefix_len,
                       bool shared, AttentionDims dims) {
  Tape& t = q.tape();
  const std::size_t D = q.value().cols(), dh = D / dims.heads;
  std::vector<Var> samples;
  for (std::size_t b = 0; b < dims.batch; ++b) {
    const std::size_t r0 = b * dims.tokens, r1 = r0 + dims.tokens;
    Var qb = slice_rows(q, r0, r1), kb = slice_rows(k, r0, r1), vb = slice_rows(v, r0, r1);
    Var pkb = shared ? pk : slice_rows(pk, b * prefix_len, (b + 1) * prefix_len);
    Var pvb = shared ? pv : slice_rows(pv, b * prefix_len, (b + 1) * prefix_len);
    Var out_b;
    for (std::size_t h = 0; h < dims.heads; ++h) {
      Var sel = t.constant(selector(D, h * dh, dh));
      Var kparts[] = {matmul(pkb, sel), matmul(kb, sel)};
      Var vparts[] = {matmul(pvb, sel), matmul(vb, sel)};
      Var kc = concat(kparts), vc = concat(vparts);
      Var a = softmax(scale(matmul(matmul(qb, sel), transpose(kc)), 1.0 / std::sqrt(double(dh))), 1);
      Var o = matmul(matmul(a, vc), transpose(sel));
      out_b = h == 0 ? o : out_b + o;
    }
    samples.push_back(out_b);
  }
  return concat(samples);
}

}  // namespace

TEST_CASE("softmax of identical logits is uniform") {
  Tape t;
  Var y = softmax(t.constant(Array({3}, 0.0)), 0);
  for (double v : y.value().values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("softmax rows sum to one along the named axis") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Tape t;
    Array x = random_array({4, 5, 3}, rng, 10.0);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      Var y = softmax(t.constant(x), axis);
      const Shape& s = x.shape();
      std::size_t outer = 1, inner = 1;
      for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
      for (std::size_t i = axis + 1; i < 3; ++i) inner *= s[i];
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          double sum = 0;
          for (std::size_t k = 0; k < s[axis]; ++k) {
            const double v = y.value()[o * s[axis] * inner + k * inner + in];
            CHECK(v >= 0.0);
            sum += v;
          }
          CHECK(std::abs(sum - 1.0) < 1e-6);
        }
    }
  }
}

TEST_CASE("softmax is stable for large logits") {
  Tape t;
  Var y = softmax(t.constant(Array({2}, {1000.0, 1000.0})), 0);
  CHECK(y.value()[0] == doctest::Approx(0.5));
}

TEST_CASE("nuclear norm") {
  CHECK(nuclear_norm(Array::matrix(2, 2, {1, 0, 0, 1})) == doctest::Approx(2.0));
  const Array m = Array::matrix(2, 2, {3, 0, 4, 0});
  CHECK(nuclear_norm(m) == doctest::Approx(5.0).epsilon(1e-14));
  CHECK(eigen_nuclear_norm(m) == doctest::Approx(5.0).epsilon(1e-14));
  CHECK_THROWS_AS(nuclear_norm(Array({2, 2, 2})), ShapeError);
  CHECK_THROWS_AS(nuclear_norm(Array({4})), ShapeError);

  Rng rng(11);
  for (auto shape : {Shape{20, 32}, Shape{32, 20}, Shape{5, 5}, Shape{1, 7}, Shape{9, 1}}) {
    const Array a = random_array(shape, rng);
    CHECK(nuclear_norm(a) == doctest::Approx(eigen_nuclear_norm(a)).epsilon(1e-12));
  }
  // Rank one: identical rows r give sqrt(rows) * |r|.
  Array rank1({4, 3});
  for (std::size_t i = 0; i < 4; ++i) {
    rank1.at(i, 0) = 1;
    rank1.at(i, 1) = 2;
    rank1.at(i, 2) = 2;
  }
  CHECK(nuclear_norm(rank1) == doctest::Approx(6.0).epsilon(1e-14));
  CHECK(nuclear_norm(Array({3, 3}, 0.0)) == 0.0);
}

TEST_CASE("layer norm rows have zero mean and unit variance before the affine") {
  Rng rng(3);
  Tape t;
  const Array x = random_array({6, 16}, rng, 3.0);
  Var y = layer_norm(t.constant(x), t.constant(Array({16}, 1.0)), t.constant(Array({16}, 0.0)));
  for (std::size_t r = 0; r < 6; ++r) {
    auto row = y.value().row(r);
    const double mu = std::accumulate(row.begin(), row.end(), 0.0) / 16.0;
    double var = 0;
    for (double v : row) var += (v - mu) * (v - mu);
    CHECK(std::abs(mu) < 1e-12);
    CHECK(std::abs(var / 16.0 - 1.0) < 1e-5);
  }
}

TEST_CASE("shape mismatches name both shapes") {
  Tape t;
  Var a = t.constant(Array({2, 3}));
  Var b = t.constant(Array({2, 3}));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("and [2x3]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, t.constant(Array({3, 2}))), ShapeError);
}

TEST_CASE("backward on simple sums") {
  Parameter x{"x", Array({3}, {0.5, -1.0, 2.0})};
  Tape t;
  Var loss = sum(t.parameter(x));
  auto g = t.backward(loss);
  for (double v : g.of(x).values()) CHECK(v == 1.0);

  Parameter y{"y", Array({2}, {1.0, 2.0})};
  Tape t2;
  Var yv = t2.parameter(y);
  auto g2 = t2.backward(sum(yv * yv));
  CHECK(g2.of(y)[0] == 2.0);
  CHECK(g2.of(y)[1] == 4.0);
}

TEST_CASE("backward rejects non-scalar losses and zeroes unreachable parameters") {
  Parameter x{"x", Array({2}, 1.0)}, unused{"unused", Array({3}, 1.0)};
  Tape t;
  Var xv = t.parameter(x);
  t.parameter(unused);
  CHECK_THROWS_AS(t.backward(xv), ShapeError);
  auto g = t.backward(sum(xv));
  REQUIRE(g.contains(unused));
  for (double v : g.of(unused).values()) CHECK(v == 0.0);
}

TEST_CASE("relu derivative at zero is zero") {
  Parameter x{"x", Array({3}, {-1.0, 0.0, 1.0})};
  Tape t;
  auto g = t.backward(sum(relu(t.parameter(x))));
  CHECK(g.of(x)[0] == 0.0);
  CHECK(g.of(x)[1] == 0.0);
  CHECK(g.of(x)[2] == 1.0);
}

TEST_CASE("gradients are bitwise reproducible") {
  Rng rng(5);
  Parameter w{"w", random_array({4, 4}, rng)};
  const Array x = random_array({3, 4}, rng);
  auto run = [&] {
    Tape t;
    Var h = softmax(matmul(t.constant(x), t.parameter(w)), 1);
    return t.backward(sum(h * h)).of(w);
  };
  CHECK(run().bitwise_equal(run()));
}

TEST_CASE("f32 tapes store float-representable values") {
  Tape t(Precision::f32);
  Var y = scale(t.constant(Array({2}, {0.1, 1.0 / 3.0})), 3.0);
  for (double v : y.value().values()) CHECK(v == static_cast<double>(static_cast<float>(v)));
}

TEST_CASE("grad_check: quadratic is exact") {
  Rng rng(9);
  Parameter a{"a", random_array({3, 2}, rng)};
  Parameter* params[] = {&a};
  auto report = grad_check([&](Tape& t) {
    Var v = t.parameter(a);
    return sum(scale(v * v, 1.5));
  }, params);
  CHECK(report.max_relative_error < 1e-8);
  CHECK(report.checked == 6);
  CHECK(report.skipped.empty());
}

TEST_CASE("grad_check: relu kink is skipped, not failed") {
  Parameter a{"a", Array({3}, {0.0, 0.7, -0.4})};
  Parameter* params[] = {&a};
  auto report = grad_check([&](Tape& t) { return sum(relu(t.parameter(a))); }, params);
  REQUIRE(report.skipped.size() == 1);
  CHECK(report.skipped[0] == "a[0]");
  CHECK(report.max_relative_error < 1e-8);
}

TEST_CASE("grad_check: rejects non-deterministic losses") {
  Parameter a{"a", Array({2}, 1.0)};
  Parameter* params[] = {&a};
  int calls = 0;
  CHECK_THROWS_AS(grad_check([&](Tape& t) {
                    return scale(sum(t.parameter(a)), 1.0 + 1e-3 * ++calls);
                  }, params),
                  std::logic_error);
}

TEST_CASE("grad_check: detects a corrupted analytic gradient") {
  Parameter a{"a", Array({2}, {0.3, 0.4})};
  Parameter* params[] = {&a};
  GradCheckOptions opts;
  opts.tamper_analytic = [](const Parameter&, Array& g) { g[1] += 0.5; };
  auto report = grad_check([&](Tape& t) { Var v = t.parameter(a); return sum(v * v); },
                           params, opts);
  CHECK(report.max_relative_error > 0.1);
  CHECK(report.worst_parameter == "a");
  CHECK(report.worst_index == 1);
}

TEST_CASE("every op matches central differences on random inputs") {
  Rng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    Parameter a{"a", random_array({3, 4}, rng)};
    Parameter b{"b", random_array({4, 5}, rng)};
    Parameter c{"c", random_array({3, 4}, rng)};
    Parameter g{"g", random_array({4}, rng)};
    Parameter s{"s", random_array({1}, rng)};
    Parameter w{"w", random_array({3, 2}, rng)};
    const std::size_t labels[] = {1, 0, 2};
    const std::size_t rows[] = {2, 0, 2};
    Parameter* params[] = {&a, &b, &c, &g, &s, &w};
    auto report = grad_check([&](Tape& t) {
      Var av = t.parameter(a), bv = t.parameter(b), cv = t.parameter(c);
      Var gv = t.parameter(g), sv = t.parameter(s), wv = t.parameter(w);
      Var ab = matmul(av, bv);
      Var sm = softmax(ab, 0) * softmax(ab, 1);
      Var ln = layer_norm(av - cv, gv, scale(gv, 0.3));
      Var ce = cross_entropy(matmul(ln, transpose(cv)), labels);
      Var cs = cosine_similarity(av, cv);
      Var parts[] = {slice_rows(av, 1, 3), gather_rows(cv, rows)};
      Var cat = concat(parts);
      Var sl[] = {av, cv};
      Var bl = blend(softmax(wv, 1), sl);
      Var gates = sigmoid(scale_by(add_row(av, gv), sv));
      Var lg = log(add_scalar(exp(scale(av, 0.5)), 1.0));
      Var avg = average(sl);
      return sum(sm) + ce + cs + mean(cat * cat) + mean(bl * bl) +
             sum(clamp(gates, 0.05, 0.95)) + mean(lg) + mean(avg * avg) +
             sum(reshape(relu(av + cv), {12}));
    }, params);
    CHECK(report.max_relative_error < 1e-7);
  }
}

TEST_CASE("prefix attention matches central differences") {
  Rng rng(33);
  const AttentionDims dims{2, 3, 2};
  for (bool shared : {true, false}) {
    const std::size_t plen = 2, prows = shared ? plen : plen * dims.batch;
    Parameter q{"q", random_array({6, 4}, rng)}, k{"k", random_array({6, 4}, rng)};
    Parameter v{"v", random_array({6, 4}, rng)};
    Parameter pk{"pk", random_array({prows, 4}, rng)}, pv{"pv", random_array({prows, 4}, rng)};
    const Array r = random_array({6, 4}, rng);
    Parameter* params[] = {&q, &k, &v, &pk, &pv};
    auto report = grad_check([&](Tape& t) {
      PrefixRows p{t.parameter(pk), t.parameter(pv), plen};
      Var o = prefix_attention(t.parameter(q), t.parameter(k), t.parameter(v), p, dims);
      return sum(o * t.constant(r));
    }, params);
    CHECK(report.max_relative_error < 1e-7);
  }
}

TEST_CASE("fused prefix attention equals the primitive composition") {
  Rng rng(44);
  const AttentionDims dims{3, 4, 2};
  for (bool shared : {true, false}) {
    const std::size_t plen = 3, prows = shared ? plen : plen * dims.batch;
    Parameter q{"q", random_array({12, 6}, rng)}, k{"k", random_array({12, 6}, rng)};
    Parameter v{"v", random_array({12, 6}, rng)};
    Parameter pk{"pk", random_array({prows, 6}, rng)}, pv{"pv", random_array({prows, 6}, rng)};
    const Array r = random_array({12, 6}, rng);

    Tape t1;
    std::vector<Array> probs;
    Var o1 = prefix_attention(t1.parameter(q), t1.parameter(k), t1.parameter(v),
                              PrefixRows{t1.parameter(pk), t1.parameter(pv), plen}, dims,
                              &probs);
    auto g1 = t1.backward(sum(o1 * t1.constant(r)));
    REQUIRE(probs.size() == dims.batch * dims.heads);
    for (const auto& pm : probs) {
      CHECK(pm.shape() == Shape{dims.tokens, plen + dims.tokens});
      for (std::size_t i = 0; i < pm.rows(); ++i) {
        double s = 0;
        for (double x : pm.row(i)) s += x;
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
      }
    }

    Tape t2;
    Var o2 = composed_attention(t2.parameter(q), t2.parameter(k), t2.parameter(v),
                                t2.parameter(pk), t2.parameter(pv), plen, shared, dims);
    auto g2 = t2.backward(sum(o2 * t2.constant(r)));

    for (std::size_t i = 0; i < o1.value().size(); ++i)
      CHECK(o1.value()[i] == doctest::Approx(o2.value()[i]).epsilon(1e-12));
    for (const Parameter* p : {&q, &k, &v, &pk, &pv})
      for (std::size_t i = 0; i < p->value.size(); ++i)
        CHECK(g1.of(*p)[i] == doctest::Approx(g2.of(*p)[i]).epsilon(1e-10));
  }
}

TEST_CASE("prefix attention without a prefix is plain self-attention") {
  Rng rng(45);
  const AttentionDims dims{1, 3, 1};
  Tape t;
  const Array x = random_array({3, 2}, rng);
  Var o = prefix_attention(t.constant(x), t.constant(x), t.constant(x), std::nullopt, dims);
  // Loop oracle.
  for (std::size_t i = 0; i < 3; ++i) {
    double w[3], z = 0, mx = -1e300;
    for (std::size_t j = 0; j < 3; ++j) {
      w[j] = (x.at(i, 0) * x.at(j, 0) + x.at(i, 1) * x.at(j, 1)) / std::sqrt(2.0);
      mx = std::max(mx, w[j]);
    }
    for (double& wj : w) z += (wj = std::exp(wj - mx));
    for (std::size_t c = 0; c < 2; ++c) {
      double out = 0;
      for (std::size_t j = 0; j < 3; ++j) out += w[j] / z * x.at(j, c);
      CHECK(o.value().at(i, c) == doctest::Approx(out).epsilon(1e-13));
    }
  }
}

TEST_CASE("blend mixes slices per sample") {
  Tape t;
  Var w = t.constant(Array::matrix(2, 2, {1.0, 0.0, 0.25, 0.75}));
  Var s[] = {t.constant(Array::matrix(1, 2, {4, 8})), t.constant(Array::matrix(1, 2, {0, 4}))};
  Var b = blend(w, s);
  CHECK(b.shape() == Shape{2, 2});
  CHECK(b.value().at(0, 0) == 4.0);
  CHECK(b.value().at(0, 1) == 8.0);
  CHECK(b.value().at(1, 0) == 1.0);
  CHECK(b.value().at(1, 1) == 5.0);
}

TEST_CASE("cross entropy of uniform logits is log of class count") {
  Tape t;
  const std::size_t labels[] = {0, 3};
  Var ce = cross_entropy(t.constant(Array({2, 4}, 0.5)), labels);
  CHECK(ce.value().item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("log and cosine reject degenerate inputs") {
  Tape t;
  CHECK_THROWS(log(t.constant(Array({2}, {1.0, 0.0}))));
  CHECK_THROWS(cosine_similarity(t.constant(Array({2}, 0.0)), t.constant(Array({2}, 1.0))));
}
