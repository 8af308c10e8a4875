// SPDX-License-Identifier: Apache-2.0
#include "rbwp/harness/config.hpp"

#include <cmath>
#include <stdexcept>

namespace rbwp::harness {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::rainbow: return "rainbow";
    case Strategy::fixed_weighted_sum: return "fixed_weighted_sum";
    case Strategy::frozen_specific: return "frozen_specific";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  for (Strategy s : {Strategy::rainbow, Strategy::fixed_weighted_sum, Strategy::frozen_specific})
    if (to_string(s) == name) return s;
  throw std::invalid_argument("unknown strategy '" + name + "'");
}

backbone::EncoderConfig ModelConfig::encoder() const {
  backbone::EncoderConfig c;
  c.layers = layers;
  c.dim = dim;
  c.heads = heads;
  c.tokens = patches + 1;
  c.mlp_dim = mlp_dim;
  return c;
}

evolution::EvolutionDims ModelConfig::evolution() const {
  evolution::EvolutionDims d;
  d.layers = layers;
  d.dim = dim;
  d.prompt_length = prompt_length;
  d.proj_dim = proj_dim;
  d.align_dim = align_dim;
  return d;
}

void LossConfig::validate() const {
  if (!(lambda_sparse >= 0) || !std::isfinite(lambda_sparse))
    throw std::invalid_argument("lambda_sparse must be non-negative");
  if (!(lambda_match >= 0) || !std::isfinite(lambda_match))
    throw std::invalid_argument("lambda_match must be non-negative");
  if (!(learning_rate > 0) || !std::isfinite(learning_rate))
    throw std::invalid_argument("learning_rate must be positive");
  if (epochs_per_task == 0) throw std::invalid_argument("epochs_per_task must be positive");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
}

void RunConfig::validate() const {
  scenario.validate();
  model.encoder().validate();
  model.evolution().validate();
  loss.validate();
  if (!(gate.tau > 0)) throw std::invalid_argument("tau must be positive");
  if (!(gate.soft_phase_fraction >= 0 && gate.soft_phase_fraction <= 1))
    throw std::invalid_argument("soft_phase_fraction must lie in [0, 1]");
}

}  // namespace rbwp::harness
