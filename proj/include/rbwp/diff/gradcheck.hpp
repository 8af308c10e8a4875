// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rbwp/diff/tape.hpp"

namespace rbwp::diff {

/// Builds a scalar loss on the given tape from the current parameter values.
using LossFn = std::function<Var(Tape&)>;

struct GradCheckOptions {
  double step = 1e-5;
  /// Test hook applied to each analytic gradient before comparison.
  std::function<void(const Parameter&, Array&)> tamper_analytic;
};

struct GradCheckReport {
  /// max over entries of |analytic - central| / max(1, |central|)
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  /// Entries sitting on a non-differentiable point (one-sided slopes differ
  /// and the analytic value matches one of them), as "name[index]".
  std::vector<std::string> skipped;
};

/// Compares reverse-mode gradients of `loss` against central differences for
/// every entry of `params`. Always evaluates in 64-bit precision. Throws
/// std::logic_error when two evaluations at the same point differ.
GradCheckReport grad_check(const LossFn& loss, std::span<Parameter* const> params,
                           const GradCheckOptions& options = {});

}  // namespace rbwp::diff
