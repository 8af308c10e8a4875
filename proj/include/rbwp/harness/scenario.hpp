// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "rbwp/diff/array.hpp"

namespace rbwp::harness {

struct ScenarioConfig {
  std::size_t tasks = 5;
  std::size_t classes_per_task = 2;
  std::size_t samples_per_class = 50;
  /// Scale of the class means relative to unit per-entry noise.
  double separation = 2.0;
  std::uint64_t seed = 1;

  /// Requires at least two tasks, two classes per task and five samples
  /// per class; separation must be finite and non-negative.
  void validate() const;
};

struct Sample {
  Array input;  // patches x D
  std::size_t label = 0;
};

struct TaskData {
  std::vector<std::size_t> classes;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

struct Scenario {
  ScenarioConfig config;
  std::size_t patches = 0;
  std::size_t dim = 0;
  std::vector<TaskData> tasks;

  std::size_t class_count() const;
  /// FNV-1a over every input value and label, for cross-run comparison.
  std::uint64_t fingerprint() const;
};

/// Gaussian cluster per class: a seeded mean of patches x D entries drawn
/// N(0, separation^2), plus unit normal noise per sample. Classes are
/// numbered consecutively by task. 80% of each class trains, 20% tests.
Scenario build_scenario(const ScenarioConfig& config, std::size_t patches, std::size_t dim);

/// Throws std::invalid_argument when two tasks share a class id.
void require_disjoint(std::span<const TaskData> tasks);

}  // namespace rbwp::harness
