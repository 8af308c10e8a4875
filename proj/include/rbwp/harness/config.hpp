// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>

#include "rbwp/backbone/encoder.hpp"
#include "rbwp/diff/tape.hpp"
#include "rbwp/evolution/evolution.hpp"
#include "rbwp/gate/gate.hpp"
#include "rbwp/harness/scenario.hpp"

namespace rbwp::harness {

enum class Strategy { rainbow, fixed_weighted_sum, frozen_specific };

std::string to_string(Strategy s);
/// Throws std::invalid_argument for unknown names.
Strategy parse_strategy(const std::string& name);

struct ModelConfig {
  std::size_t layers = 5;
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t patches = 16;
  std::size_t mlp_dim = 64;
  std::size_t prompt_length = 20;
  std::size_t proj_dim = 16;
  std::size_t align_dim = 8;
  std::uint64_t encoder_seed = 7;

  backbone::EncoderConfig encoder() const;
  evolution::EvolutionDims evolution() const;
};

struct LossConfig {
  double lambda_sparse = 0.01;
  double lambda_match = 0.01;
  double learning_rate = 0.03;
  std::size_t epochs_per_task = 30;
  std::size_t batch_size = 32;

  void validate() const;
};

struct RunConfig {
  ScenarioConfig scenario;
  ModelConfig model;
  LossConfig loss;
  gate::GateConfig gate;
  Strategy strategy = Strategy::rainbow;
  diff::Precision precision = diff::Precision::f32;

  /// Validates every section; throws std::invalid_argument naming the field.
  void validate() const;
};

}  // namespace rbwp::harness
