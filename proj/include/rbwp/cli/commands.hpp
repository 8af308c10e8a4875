// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <vector>

#include "rbwp/harness/config.hpp"

namespace rbwp::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kConfigError = 2, kFailure = 3 };

struct RunOptions {
  std::filesystem::path config;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  /// compare only; empty selects every strategy.
  std::vector<harness::Strategy> strategies;
};

/// Trains the configured strategy and writes its output directory.
int run_command(const RunOptions& options, std::ostream& out, std::ostream& err);

/// Runs the selected strategies on the configured scenario, one
/// subdirectory each, plus comparison.csv and diversity.svg.
int compare_command(const RunOptions& options, std::ostream& out, std::ostream& err);

struct CheckOptions {
  bool gradcheck = false;
  bool corrupt_gradient = false;
};

int check_command(const CheckOptions& options, std::ostream& out, std::ostream& err);

/// Relative error bound applied by `check --gradcheck`.
inline constexpr double kGradCheckTolerance = 1e-4;

}  // namespace rbwp::cli
