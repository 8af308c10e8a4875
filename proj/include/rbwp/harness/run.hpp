// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rbwp/harness/learner.hpp"
#include "rbwp/harness/metrics.hpp"

namespace rbwp::harness {

/// Query features of every task's train and test split.
struct ScenarioQueries {
  std::vector<Array> train;
  std::vector<Array> test;
};

ScenarioQueries compute_queries(const backbone::Encoder& encoder, const Scenario& scenario);

struct StepRecord {
  std::size_t step = 0;  // 1-based
  Metrics metrics;
  std::optional<double> diversity;
};

struct RunResult {
  std::string strategy;
  std::uint64_t scenario_fingerprint = 0;
  AccuracyMatrix accuracy{0};
  std::vector<StepRecord> steps;
  ParameterReport parameters;
  /// Bitwise comparisons of finalized state against its finalize-time copy.
  std::vector<std::string> immutability_violations;
  std::size_t immutability_checks = 0;
  /// Evolution operations and gate relaxations observed during test sweeps.
  std::uint64_t inference_evolution_ops = 0;
  std::uint64_t inference_relaxations = 0;
  /// Predicted classes on every task's test set after the final task.
  std::vector<std::vector<std::size_t>> final_predictions;
};

/// Trains every task of the scenario in order, evaluating all seen tasks
/// after each one. When `out_dir` is given, writes encoder.bin, prompts/,
/// events.log, accuracy_matrix.csv, metrics.csv and parameters.csv there.
/// A non-finite loss appends an abort line to events.log, writes
/// diagnostic.bin with the current task's parameters and rethrows.
RunResult run_scenario(Learner& learner, const Scenario& scenario, const ScenarioQueries& queries,
                       const std::optional<std::filesystem::path>& out_dir = std::nullopt);

/// Test-set predictions of every task so far, in scenario order.
std::vector<std::vector<std::size_t>> predict_all(const Learner& learner, const Scenario& scenario,
                                                  const ScenarioQueries& queries);

/// Float formatting used in every output file: 6 significant digits.
std::string format_real(double v);

std::string events_line(const EpochLog& log);

}  // namespace rbwp::harness
