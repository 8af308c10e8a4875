// SPDX-License-Identifier: Apache-2.0
#include "rbwp/harness/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace rbwp::harness {

AccuracyMatrix::AccuracyMatrix(std::size_t tasks) {
  for (std::size_t t = 0; t < tasks; ++t) a_.emplace_back(t + 1);
}

void AccuracyMatrix::set(std::size_t step, std::size_t task, double accuracy) {
  if (task > step || step >= a_.size())
    throw std::out_of_range("accuracy entry (" + std::to_string(step) + ", " +
                            std::to_string(task) + ") outside the lower triangle");
  if (!(accuracy >= 0.0 && accuracy <= 1.0))
    throw std::invalid_argument("accuracy must lie in [0, 1]");
  a_[step][task] = accuracy;
}

std::optional<double> AccuracyMatrix::get(std::size_t step, std::size_t task) const {
  if (step >= a_.size() || task > step) return std::nullopt;
  return a_[step][task];
}

bool AccuracyMatrix::complete(std::size_t n) const {
  if (n > a_.size()) return false;
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t i = 0; i <= t; ++i)
      if (!a_[t][i]) return false;
  return true;
}

Metrics metrics(const AccuracyMatrix& a, std::size_t n) {
  if (n == 0 || !a.complete(n))
    throw std::invalid_argument("accuracy matrix incomplete for " + std::to_string(n) + " steps");
  const std::size_t last = n - 1;
  Metrics m;
  for (std::size_t i = 0; i < n; ++i) m.average_accuracy += *a.get(last, i);
  m.average_accuracy /= static_cast<double>(n);
  if (n == 1) return m;
  m.forgetting_defined = true;
  for (std::size_t i = 0; i < last; ++i) {
    double best = *a.get(i, i);
    for (std::size_t t = i; t < last; ++t) best = std::max(best, *a.get(t, i));
    m.forgetting += best - *a.get(last, i);
  }
  m.forgetting /= static_cast<double>(last);
  return m;
}

double matching_loss(std::span<const double> q, std::span<const double> e) {
  if (q.size() != e.size()) throw std::invalid_argument("matching_loss: size mismatch");
  double dot = 0, nq = 0, ne = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    dot += q[i] * e[i];
    nq += q[i] * q[i];
    ne += e[i] * e[i];
  }
  if (nq == 0 || ne == 0) throw std::invalid_argument("matching_loss: zero-norm vector");
  return 1.0 - dot / std::sqrt(nq * ne);
}

diff::Var matching_loss(diff::Var q, diff::Var e) {
  return diff::add_scalar(diff::scale(diff::cosine_similarity(q, e), -1.0), 1.0);
}

std::size_t select_task(std::span<const double> q, std::span<const Array> embeddings) {
  if (embeddings.empty()) throw std::invalid_argument("select_task: no stored embeddings");
  std::size_t best = 0;
  double best_cos = -2.0;
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    const double c = 1.0 - matching_loss(q, embeddings[i].values());
    if (c > best_cos) {
      best_cos = c;
      best = i;
    }
  }
  return best;
}

std::vector<double> task_weights(std::span<const double> q, std::span<const Array> embeddings) {
  if (embeddings.empty()) throw std::invalid_argument("task_weights: no stored embeddings");
  std::vector<double> w(embeddings.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 1.0 - matching_loss(q, embeddings[i].values());
  const double mx = *std::max_element(w.begin(), w.end());
  double z = 0;
  for (double& v : w) z += (v = std::exp(v - mx));
  for (double& v : w) v /= z;
  return w;
}

std::optional<double> mean_present(std::span<const std::optional<double>> values) {
  double s = 0;
  std::size_t n = 0;
  for (const auto& v : values)
    if (v) {
      s += *v;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return s / static_cast<double>(n);
}

}  // namespace rbwp::harness
