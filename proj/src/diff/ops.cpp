// SPDX-License-Identifier: Apache-2.0
#include "rbwp/diff/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

namespace rbwp::diff {

namespace {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

Tape& same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape())
    throw std::invalid_argument("operands recorded on different tapes");
  return a.tape();
}

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) throw ShapeError::mismatch(op, a.shape(), b.shape());
}

void require_rank2(const char* op, Var a) {
  if (a.value().rank() != 2)
    throw ShapeError(std::string(op) + ": expected 2-D array, got " +
                     to_string(a.shape()));
}

template <class Forward, class Derivative>
Var unary(Var a, Forward f, Derivative df) {
  const Array& x = a.value();
  Array out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  const std::size_t ia = a.id();
  Var in[] = {a};
  auto self = std::make_shared<std::size_t>(0);
  Var r = a.tape().record(std::move(out), in,
                          [ia, df, self](Tape& t, std::span<const double> g) {
                            const Array& xv = t.value(ia);
                            const Array& yv = t.value(*self);
                            auto ga = t.grad(ia);
                            for (std::size_t i = 0; i < g.size(); ++i)
                              ga[i] += g[i] * df(xv[i], yv[i]);
                          });
  *self = r.id();
  return r;
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_rank2("matmul", a);
  require_rank2("matmul", b);
  if (a.value().cols() != b.value().rows())
    throw ShapeError::mismatch("matmul", a.shape(), b.shape());
  const std::size_t m = a.value().rows(), k = a.value().cols(),
                    n = b.value().cols();
  const std::size_t ia = a.id(), ib = b.id();
  Var in[] = {a, b};
  return t.record(rbwp::matmul(a.value(), b.value()), in,
                  [ia, ib, m, k, n](Tape& t, std::span<const double> g) {
                    ConstMap gm(g.data(), m, n);
                    if (t.requires_grad(ia)) {
                      ConstMap bm(t.value(ib).values().data(), k, n);
                      MutMap(t.grad(ia).data(), m, k).noalias() +=
                          gm * bm.transpose();
                    }
                    if (t.requires_grad(ib)) {
                      ConstMap am(t.value(ia).values().data(), m, k);
                      MutMap(t.grad(ib).data(), k, n).noalias() +=
                          am.transpose() * gm;
                    }
                  });
}

Var transpose(Var a) {
  require_rank2("transpose", a);
  const std::size_t r = a.value().rows(), c = a.value().cols();
  const std::size_t ia = a.id();
  Var in[] = {a};
  return a.tape().record(rbwp::transpose(a.value()), in,
                         [ia, r, c](Tape& t, std::span<const double> g) {
                           auto ga = t.grad(ia);
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j)
                               ga[i * c + j] += g[j * r + i];
                         });
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape("add", a, b);
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  Var in[] = {a, b};
  return t.record(std::move(out), in, [ia, ib](Tape& t, std::span<const double> g) {
    for (auto id : {ia, ib}) {
      if (!t.requires_grad(id)) continue;
      auto gx = t.grad(id);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape("sub", a, b);
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  Var in[] = {a, b};
  return t.record(std::move(out), in, [ia, ib](Tape& t, std::span<const double> g) {
    if (t.requires_grad(ia)) {
      auto gx = t.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto gx = t.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape("mul", a, b);
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  Var in[] = {a, b};
  return t.record(std::move(out), in, [ia, ib](Tape& t, std::span<const double> g) {
    const Array& av = t.value(ia);
    const Array& bv = t.value(ib);
    if (t.requires_grad(ia)) {
      auto gx = t.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto gx = t.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * av[i];
    }
  });
}

Var add_row(Var x, Var bias) {
  Tape& t = same_tape(x, bias);
  require_rank2("add_row", x);
  const std::size_t m = x.value().rows(), n = x.value().cols();
  if (bias.value().size() != n)
    throw ShapeError::mismatch("add_row", x.shape(), bias.shape());
  Array out = x.value();
  const Array& bv = bias.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  const std::size_t ix = x.id(), ib = bias.id();
  Var in[] = {x, bias};
  return t.record(std::move(out), in,
                  [ix, ib, m, n](Tape& t, std::span<const double> g) {
                    if (t.requires_grad(ix)) {
                      auto gx = t.grad(ix);
                      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                    }
                    if (t.requires_grad(ib)) {
                      auto gb = t.grad(ib);
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                    }
                  });
}

Var scale(Var a, double factor) {
  return unary(
      a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Var scale_by(Var a, Var factor) {
  Tape& t = same_tape(a, factor);
  if (factor.value().size() != 1)
    throw ShapeError::mismatch("scale_by", a.shape(), factor.shape());
  const double s = factor.value()[0];
  Array out = a.value();
  for (auto& v : out.values()) v *= s;
  const std::size_t ia = a.id(), is = factor.id();
  Var in[] = {a, factor};
  return t.record(std::move(out), in, [ia, is](Tape& t, std::span<const double> g) {
    const double s = t.value(is)[0];
    if (t.requires_grad(ia)) {
      auto gx = t.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
    }
    if (t.requires_grad(is)) {
      const Array& av = t.value(ia);
      double acc = 0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      t.grad(is)[0] += acc;
    }
  });
}

Var add_scalar(Var a, double c) {
  return unary(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var exp(Var a) {
  return unary(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Var log(Var a) {
  for (double v : a.value().values())
    if (!(v > 0.0)) throw NumericalError("log: non-positive input");
  return unary(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Var sigmoid(Var a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var clamp(Var a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Var softmax(Var a, std::size_t axis) {
  const Shape& s = a.shape();
  if (axis >= s.size())
    throw ShapeError("softmax: axis " + std::to_string(axis) +
                     " out of range for shape " + to_string(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  const Array& x = a.value();
  Array out(s);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, x[base + k * inner]);
      double z = 0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(x[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  }
  const std::size_t ia = a.id();
  Var in[] = {a};
  auto self = std::make_shared<std::size_t>(0);
  Var r = a.tape().record(
      std::move(out), in,
      [ia, self, outer, inner, len](Tape& t, std::span<const double> g) {
        const Array& y = t.value(*self);
        auto ga = t.grad(ia);
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double dot = 0;
            for (std::size_t k = 0; k < len; ++k)
              dot += g[base + k * inner] * y[base + k * inner];
            for (std::size_t k = 0; k < len; ++k) {
              const std::size_t idx = base + k * inner;
              ga[idx] += y[idx] * (g[idx] - dot);
            }
          }
        }
      });
  *self = r.id();
  return r;
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = same_tape(x, gamma);
  same_tape(x, beta);
  const Shape& s = x.shape();
  const std::size_t n = s.back();
  if (gamma.value().size() != n)
    throw ShapeError::mismatch("layer_norm", s, gamma.shape());
  if (beta.value().size() != n)
    throw ShapeError::mismatch("layer_norm", s, beta.shape());
  const std::size_t rows = x.value().size() / n;
  const Array& xv = x.value();
  const Array& gv = gamma.value();
  const Array& bv = beta.value();
  Array out(s);
  std::vector<double> xhat(xv.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = &xv[r * n];
    double mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * inv_std[r];
      xhat[r * n + j] = h;
      out[r * n + j] = h * gv[j] + bv[j];
    }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  Var in[] = {x, gamma, beta};
  return t.record(
      std::move(out), in,
      [ix, ig, ib, rows, n, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Tape& t, std::span<const double> g) {
        const Array& gv = t.value(ig);
        if (t.requires_grad(ig)) {
          auto gg = t.grad(ig);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j)
              gg[j] += g[r * n + j] * xhat[r * n + j];
        }
        if (t.requires_grad(ib)) {
          auto gb = t.grad(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
        }
        if (t.requires_grad(ix)) {
          auto gx = t.grad(ix);
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dh = g[r * n + j] * gv[j];
              m1 += dh;
              m2 += dh * xhat[r * n + j];
            }
            m1 *= inv_n;
            m2 *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const double dh = g[r * n + j] * gv[j];
              gx[r * n + j] += inv_std[r] * (dh - m1 - xhat[r * n + j] * m2);
            }
          }
        }
      });
}

Var sum(Var a) {
  double s = 0;
  for (double v : a.value().values()) s += v;
  const std::size_t ia = a.id();
  Var in[] = {a};
  return a.tape().record(Array::scalar(s), in,
                         [ia](Tape& t, std::span<const double> g) {
                           for (auto& v : t.grad(ia)) v += g[0];
                         });
}

Var mean(Var a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var cosine_similarity(Var a, Var b) {
  Tape& t = same_tape(a, b);
  if (a.value().size() != b.value().size())
    throw ShapeError::mismatch("cosine_similarity", a.shape(), b.shape());
  const Array& av = a.value();
  const Array& bv = b.value();
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    dot += av[i] * bv[i];
    na += av[i] * av[i];
    nb += bv[i] * bv[i];
  }
  if (na == 0.0 || nb == 0.0)
    throw std::invalid_argument("cosine_similarity: zero-norm vector");
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  const double c = dot / (na * nb);
  const std::size_t ia = a.id(), ib = b.id();
  Var in[] = {a, b};
  return t.record(Array::scalar(c), in,
                  [ia, ib, na, nb, c](Tape& t, std::span<const double> g) {
                    const Array& av = t.value(ia);
                    const Array& bv = t.value(ib);
                    if (t.requires_grad(ia)) {
                      auto ga = t.grad(ia);
                      for (std::size_t i = 0; i < av.size(); ++i)
                        ga[i] += g[0] * (bv[i] / (na * nb) - c * av[i] / (na * na));
                    }
                    if (t.requires_grad(ib)) {
                      auto gb = t.grad(ib);
                      for (std::size_t i = 0; i < bv.size(); ++i)
                        gb[i] += g[0] * (av[i] / (na * nb) - c * bv[i] / (nb * nb));
                    }
                  });
}

Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
  require_rank2("cross_entropy", logits);
  const Array& z = logits.value();
  const std::size_t rows = z.rows(), cols = z.cols();
  if (labels.size() != rows)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for logits of shape " + to_string(z.shape()));
  std::vector<double> probs(z.size());
  double loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= cols)
      throw std::out_of_range("cross_entropy: label " + std::to_string(labels[r]) +
                              " outside " + std::to_string(cols) + " classes");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, z.at(r, c));
    double zsum = 0;
    for (std::size_t c = 0; c < cols; ++c) zsum += std::exp(z.at(r, c) - mx);
    for (std::size_t c = 0; c < cols; ++c)
      probs[r * cols + c] = std::exp(z.at(r, c) - mx) / zsum;
    loss -= z.at(r, labels[r]) - mx - std::log(zsum);
  }
  loss /= static_cast<double>(rows);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  const std::size_t il = logits.id();
  Var in[] = {logits};
  return logits.tape().record(
      Array::scalar(loss), in,
      [il, rows, cols, probs = std::move(probs), lab = std::move(lab)](
          Tape& t, std::span<const double> g) {
        auto gz = t.grad(il);
        const double w = g[0] / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c)
            gz[r * cols + c] +=
                w * (probs[r * cols + c] - (c == lab[r] ? 1.0 : 0.0));
      });
}

Var reshape(Var a, Shape shape) {
  Array out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  Var in[] = {a};
  return a.tape().record(std::move(out), in,
                         [ia](Tape& t, std::span<const double> g) {
                           auto ga = t.grad(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                         });
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Shape s = parts[0].shape();
  const Shape tail(s.begin() + 1, s.end());
  std::size_t lead = 0;
  std::vector<std::size_t> ids, offsets;
  for (const auto& p : parts) {
    same_tape(parts[0], p);
    const Shape& ps = p.shape();
    if (Shape(ps.begin() + 1, ps.end()) != tail)
      throw ShapeError::mismatch("concat", s, ps);
    ids.push_back(p.id());
    offsets.push_back(lead * (element_count(tail)));
    lead += ps[0];
  }
  s[0] = lead;
  Array out(s);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Array& v = parts[k].value();
    std::copy(v.values().begin(), v.values().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>(offsets[k]));
  }
  return parts[0].tape().record(
      std::move(out), parts,
      [ids = std::move(ids), offsets = std::move(offsets)](
          Tape& t, std::span<const double> g) {
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!t.requires_grad(ids[k])) continue;
          auto gx = t.grad(ids[k]);
          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[offsets[k] + i];
        }
      });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  Shape s = a.shape();
  if (s.empty() || begin >= end || end > s[0])
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") invalid for shape " + to_string(s));
  const std::size_t stride = element_count(s) / s[0];
  s[0] = end - begin;
  const auto& src = a.value().storage();
  std::vector<double> vals(src.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                           src.begin() + static_cast<std::ptrdiff_t>(end * stride));
  const std::size_t ia = a.id(), off = begin * stride;
  Var in[] = {a};
  return a.tape().record(Array(s, std::move(vals)), in,
                         [ia, off](Tape& t, std::span<const double> g) {
                           auto ga = t.grad(ia);
                           for (std::size_t i = 0; i < g.size(); ++i)
                             ga[off + i] += g[i];
                         });
}

Var gather_rows(Var a, std::span<const std::size_t> rows) {
  require_rank2("gather_rows", a);
  const std::size_t n = a.value().cols(), m = a.value().rows();
  Array out({rows.size(), n});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= m)
      throw std::out_of_range("gather_rows: row " + std::to_string(rows[r]) +
                              " of " + std::to_string(m));
    auto src = a.value().row(rows[r]);
    std::copy(src.begin(), src.end(), out.values().begin() +
                                          static_cast<std::ptrdiff_t>(r * n));
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const std::size_t ia = a.id();
  Var in[] = {a};
  return a.tape().record(std::move(out), in,
                         [ia, n, idx = std::move(idx)](Tape& t,
                                                       std::span<const double> g) {
                           auto ga = t.grad(ia);
                           for (std::size_t r = 0; r < idx.size(); ++r)
                             for (std::size_t j = 0; j < n; ++j)
                               ga[idx[r] * n + j] += g[r * n + j];
                         });
}

Var average(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("average: no inputs");
  Array out(parts[0].shape(), 0.0);
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    same_tape(parts[0], p);
    require_same_shape("average", parts[0], p);
    const Array& v = p.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
    ids.push_back(p.id());
  }
  const double w = 1.0 / static_cast<double>(parts.size());
  for (auto& v : out.values()) v *= w;
  return parts[0].tape().record(
      std::move(out), parts,
      [ids = std::move(ids), w](Tape& t, std::span<const double> g) {
        for (auto id : ids) {
          if (!t.requires_grad(id)) continue;
          auto gx = t.grad(id);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += w * g[i];
        }
      });
}

Var blend(Var weights, std::span<const Var> slices) {
  require_rank2("blend", weights);
  const std::size_t batch = weights.value().rows(), count = weights.value().cols();
  if (slices.size() != count)
    throw ShapeError("blend: " + std::to_string(slices.size()) +
                     " slices for weights of shape " + to_string(weights.shape()));
  require_rank2("blend", slices[0]);
  const std::size_t p = slices[0].value().rows(), d = slices[0].value().cols();
  std::vector<Var> inputs{weights};
  std::vector<std::size_t> ids;
  for (const auto& s : slices) {
    same_tape(weights, s);
    require_same_shape("blend", slices[0], s);
    inputs.push_back(s);
    ids.push_back(s.id());
  }
  const Array& w = weights.value();
  Array out({batch * p, d}, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < count; ++i) {
      const double wi = w.at(b, i);
      const auto& sv = slices[i].value().storage();
      double* dst = &out[b * p * d];
      for (std::size_t e = 0; e < p * d; ++e) dst[e] += wi * sv[e];
    }
  const std::size_t iw = weights.id();
  return weights.tape().record(
      std::move(out), inputs,
      [iw, ids = std::move(ids), batch, count, p, d](Tape& t,
                                                     std::span<const double> g) {
        const Array& w = t.value(iw);
        if (t.requires_grad(iw)) {
          auto gw = t.grad(iw);
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < count; ++i) {
              const auto& sv = t.value(ids[i]).storage();
              double acc = 0;
              for (std::size_t e = 0; e < p * d; ++e) acc += g[b * p * d + e] * sv[e];
              gw[b * count + i] += acc;
            }
        }
        for (std::size_t i = 0; i < count; ++i) {
          if (!t.requires_grad(ids[i])) continue;
          auto gs = t.grad(ids[i]);
          for (std::size_t b = 0; b < batch; ++b) {
            const double wi = w.at(b, i);
            for (std::size_t e = 0; e < p * d; ++e) gs[e] += wi * g[b * p * d + e];
          }
        }
      });
}

Var prefix_attention(Var q, Var k, Var v, const std::optional<PrefixRows>& prefix,
                     AttentionDims dims, std::vector<Array>* probs) {
  Tape& t = same_tape(q, k);
  same_tape(q, v);
  require_rank2("prefix_attention", q);
  require_same_shape("prefix_attention", q, k);
  require_same_shape("prefix_attention", q, v);
  const std::size_t B = dims.batch, N = dims.tokens, H = dims.heads;
  const std::size_t D = q.value().cols();
  if (q.value().rows() != B * N)
    throw ShapeError("prefix_attention: " + std::to_string(B) + " samples of " +
                     std::to_string(N) + " tokens do not match " +
                     to_string(q.shape()));
  if (H == 0 || D % H != 0)
    throw ShapeError("prefix_attention: " + std::to_string(H) +
                     " heads do not divide width " + std::to_string(D));
  std::size_t P = 0;
  bool shared = true;
  std::vector<Var> inputs{q, k, v};
  std::size_t ipk = 0, ipv = 0;
  if (prefix) {
    P = prefix->length;
    const Array& pkv = prefix->keys.value();
    if (pkv.rank() != 2 || pkv.cols() != D)
      throw ShapeError::mismatch("prefix_attention", pkv.shape(), q.shape());
    require_same_shape("prefix_attention", prefix->keys, prefix->values);
    if (pkv.rows() == P) {
      shared = true;
    } else if (pkv.rows() == B * P) {
      shared = false;
    } else {
      throw ShapeError("prefix_attention: prefix rows " + to_string(pkv.shape()) +
                       " neither shared nor per-sample for length " +
                       std::to_string(P));
    }
    same_tape(q, prefix->keys);
    same_tape(q, prefix->values);
    inputs.push_back(prefix->keys);
    inputs.push_back(prefix->values);
    ipk = prefix->keys.id();
    ipv = prefix->values.id();
  }
  const std::size_t dh = D / H, S = P + N;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const Array& qv = q.value();
  const Array& kv = k.value();
  const Array& vv = v.value();
  const Array* pk = prefix ? &prefix->keys.value() : nullptr;
  const Array* pv = prefix ? &prefix->values.value() : nullptr;

  // Row pointers into the concatenated key/value sequence of sample b.
  auto key_row = [&](const Array* pre, const Array& own, std::size_t b,
                     std::size_t j) -> const double* {
    if (j < P) return &(*pre)[((shared ? 0 : b * P) + j) * D];
    return &own[(b * N + j - P) * D];
  };

  std::vector<double> weights(B * H * N * S);
  Array out({B * N, D}, 0.0);
  std::vector<double> row(S);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      double* A = &weights[((b * H + h) * N) * S];
      for (std::size_t i = 0; i < N; ++i) {
        const double* qi = &qv[(b * N + i) * D + h * dh];
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < S; ++j) {
          const double* kj = key_row(pk, kv, b, j) + h * dh;
          double s = 0;
          for (std::size_t e = 0; e < dh; ++e) s += qi[e] * kj[e];
          row[j] = s * sc;
          mx = std::max(mx, row[j]);
        }
        double z = 0;
        for (std::size_t j = 0; j < S; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        double* oi = &out[(b * N + i) * D + h * dh];
        for (std::size_t j = 0; j < S; ++j) {
          const double a = row[j] / z;
          A[i * S + j] = a;
          const double* vj = key_row(pv, vv, b, j) + h * dh;
          for (std::size_t e = 0; e < dh; ++e) oi[e] += a * vj[e];
        }
      }
      if (probs) {
        Array m({N, S});
        std::copy(A, A + N * S, m.values().begin());
        probs->push_back(std::move(m));
      }
    }
  }

  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return t.record(
      std::move(out), inputs,
      [=, weights = std::move(weights)](Tape& t, std::span<const double> g) {
        const Array& qv = t.value(iq);
        const Array& kv = t.value(ik);
        const Array& vv = t.value(iv);
        const Array* pk = P ? &t.value(ipk) : nullptr;
        const Array* pv = P ? &t.value(ipv) : nullptr;
        const bool gq = t.requires_grad(iq), gk = t.requires_grad(ik),
                   gv = t.requires_grad(iv);
        const bool gpk = P && t.requires_grad(ipk), gpv = P && t.requires_grad(ipv);
        std::span<double> dq, dk, dv, dpk, dpv;
        if (gq) dq = t.grad(iq);
        if (gk) dk = t.grad(ik);
        if (gv) dv = t.grad(iv);
        if (gpk) dpk = t.grad(ipk);
        if (gpv) dpv = t.grad(ipv);
        auto offset = [&](std::size_t b, std::size_t j) {
          return j < P ? ((shared ? 0 : b * P) + j) * D : (b * N + j - P) * D;
        };
        std::vector<double> dA(S);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < H; ++h) {
            const double* A = &weights[((b * H + h) * N) * S];
            for (std::size_t i = 0; i < N; ++i) {
              const double* gi = &g[(b * N + i) * D + h * dh];
              double dot = 0;
              for (std::size_t j = 0; j < S; ++j) {
                const std::size_t off = offset(b, j) + h * dh;
                const double* vj = j < P ? &(*pv)[off] : &vv[off];
                double s = 0;
                for (std::size_t e = 0; e < dh; ++e) s += gi[e] * vj[e];
                dA[j] = s;
                dot += s * A[i * S + j];
                const bool want_v = j < P ? gpv : gv;
                if (want_v) {
                  double* dvj = j < P ? &dpv[off] : &dv[off];
                  const double a = A[i * S + j];
                  for (std::size_t e = 0; e < dh; ++e) dvj[e] += a * gi[e];
                }
              }
              const double* qi = &qv[(b * N + i) * D + h * dh];
              for (std::size_t j = 0; j < S; ++j) {
                const double ds = A[i * S + j] * (dA[j] - dot) * sc;
                if (ds == 0.0) continue;
                const std::size_t off = offset(b, j) + h * dh;
                if (gq) {
                  const double* kj = j < P ? &(*pk)[off] : &kv[off];
                  double* dqi = &dq[(b * N + i) * D + h * dh];
                  for (std::size_t e = 0; e < dh; ++e) dqi[e] += ds * kj[e];
                }
                const bool want_k = j < P ? gpk : gk;
                if (want_k) {
                  double* dkj = j < P ? &dpk[off] : &dk[off];
                  for (std::size_t e = 0; e < dh; ++e) dkj[e] += ds * qi[e];
                }
              }
            }
          }
        }
      });
}

}  // namespace rbwp::diff
