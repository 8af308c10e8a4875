// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "rbwp/diff/ops.hpp"

namespace rbwp::harness {

/// a[t][i]: accuracy on task i's test set after training task t, i <= t.
class AccuracyMatrix {
 public:
  explicit AccuracyMatrix(std::size_t tasks);

  std::size_t tasks() const noexcept { return a_.size(); }
  void set(std::size_t step, std::size_t task, double accuracy);
  std::optional<double> get(std::size_t step, std::size_t task) const;
  /// True when every entry with task <= step < n is set.
  bool complete(std::size_t n) const;

 private:
  std::vector<std::vector<std::optional<double>>> a_;
};

struct Metrics {
  double average_accuracy = 0.0;
  double forgetting = 0.0;
  /// False for a single task, where forgetting is reported as 0.
  bool forgetting_defined = false;
};

/// A_N and F_N over the first `n` steps. Rejects an incomplete matrix.
Metrics metrics(const AccuracyMatrix& a, std::size_t n);

/// 1 - cos(q, e). Rejects zero-norm vectors.
double matching_loss(std::span<const double> q, std::span<const double> e);
diff::Var matching_loss(diff::Var q, diff::Var e);

/// argmax_i cos(q, e_i), ties to the smallest id.
std::size_t select_task(std::span<const double> q, std::span<const Array> embeddings);

/// softmax_i cos(q, e_i): the weighted-sum baseline's per-sample mixture.
std::vector<double> task_weights(std::span<const double> q, std::span<const Array> embeddings);

/// Mean of the present entries; empty when none is present.
std::optional<double> mean_present(std::span<const std::optional<double>> values);

}  // namespace rbwp::harness
