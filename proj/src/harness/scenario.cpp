// SPDX-License-Identifier: Apache-2.0
#include "rbwp/harness/scenario.hpp"

#include <cmath>
#include <cstring>
#include <set>
#include <stdexcept>
#include <string>

#include "rbwp/io/rng.hpp"

namespace rbwp::harness {

void ScenarioConfig::validate() const {
  if (tasks < 2) throw std::invalid_argument("scenario needs at least 2 tasks");
  if (classes_per_task < 2) throw std::invalid_argument("scenario needs at least 2 classes per task");
  if (samples_per_class < 5)
    throw std::invalid_argument("scenario needs at least 5 samples per class");
  if (!std::isfinite(separation) || separation < 0)
    throw std::invalid_argument("separation must be finite and non-negative");
}

std::size_t Scenario::class_count() const {
  std::size_t n = 0;
  for (const auto& t : tasks) n += t.classes.size();
  return n;
}

std::uint64_t Scenario::fingerprint() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& t : tasks)
    for (const auto* split : {&t.train, &t.test})
      for (const auto& s : *split) {
        mix(s.input.storage().data(), s.input.size() * sizeof(double));
        const std::uint64_t label = s.label;
        mix(&label, sizeof label);
      }
  return h;
}

void require_disjoint(std::span<const TaskData> tasks) {
  std::set<std::size_t> seen;
  for (std::size_t t = 0; t < tasks.size(); ++t)
    for (std::size_t c : tasks[t].classes)
      if (!seen.insert(c).second)
        throw std::invalid_argument("class " + std::to_string(c) + " of task " +
                                    std::to_string(t + 1) + " overlaps an earlier task");
}

Scenario build_scenario(const ScenarioConfig& config, std::size_t patches, std::size_t dim) {
  config.validate();
  Scenario s;
  s.config = config;
  s.patches = patches;
  s.dim = dim;
  const std::size_t n_train = config.samples_per_class * 4 / 5;
  for (std::size_t t = 0; t < config.tasks; ++t) {
    TaskData task;
    for (std::size_t k = 0; k < config.classes_per_task; ++k) {
      const std::size_t c = t * config.classes_per_task + k;
      task.classes.push_back(c);
      Rng rng(derive_seed(config.seed, c));
      Array mean({patches, dim});
      for (auto& v : mean.values()) v = config.separation * rng.normal();
      for (std::size_t i = 0; i < config.samples_per_class; ++i) {
        Sample smp{mean, c};
        for (auto& v : smp.input.values()) v += rng.normal();
        (i < n_train ? task.train : task.test).push_back(std::move(smp));
      }
    }
    s.tasks.push_back(std::move(task));
  }
  require_disjoint(s.tasks);
  return s;
}

}  // namespace rbwp::harness
