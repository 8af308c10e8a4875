// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "rbwp/diff/gradcheck.hpp"

namespace rbwp::harness {

struct GradientCase {
  std::string name;
  diff::GradCheckReport report;
};

struct GradientSuiteOptions {
  /// Perturbs one analytic gradient entry per case; the suite must then fail.
  bool corrupt = false;
};

/// Finite-difference checks of the composite training loss on a small
/// two-task model in 64-bit precision: rainbow with soft gates, rainbow with
/// every layer inserted, the weighted-sum baseline and task-specific prompts.
/// The second task is checked after the first has been trained and frozen.
std::vector<GradientCase> run_gradient_suite(const GradientSuiteOptions& options = {});

}  // namespace rbwp::harness
