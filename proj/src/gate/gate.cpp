// SPDX-License-Identifier: Apache-2.0
#include "rbwp/gate/gate.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <string>

namespace rbwp::gate {

namespace {

std::atomic<std::uint64_t> g_relaxations{0};

void require_tau(double tau) {
  if (!(tau > 0.0))
    throw std::invalid_argument("gumbel temperature must be positive, got " +
                                std::to_string(tau));
}

}  // namespace

std::uint64_t relax_count() noexcept { return g_relaxations.load(std::memory_order_relaxed); }

double GumbelNoise::from_uniform(double u) {
  if (!(u > 0.0 && u < 1.0)) throw std::invalid_argument("gumbel noise needs U in (0, 1)");
  return -std::log(-std::log(u));
}

GumbelNoise GumbelNoise::draw(Rng& rng) {
  return {{from_uniform(rng.open_uniform()), from_uniform(rng.open_uniform())}};
}

std::array<double, 2> gumbel_relax(std::array<double, 2> delta, const GumbelNoise& noise,
                                   double tau) {
  require_tau(tau);
  g_relaxations.fetch_add(1, std::memory_order_relaxed);
  std::array<double, 2> logit{};
  for (std::size_t p = 0; p < 2; ++p) {
    if (!(delta[p] > 0.0 && delta[p] <= 1.0))
      throw std::invalid_argument("gate distribution entries must lie in (0, 1]");
    logit[p] = (std::log(delta[p]) + noise.z[p]) / tau;
  }
  const double mx = std::max(logit[0], logit[1]);
  const double e0 = std::exp(logit[0] - mx), e1 = std::exp(logit[1] - mx);
  const double g0 = e0 / (e0 + e1);
  return {g0, 1.0 - g0};
}

double sparse_penalty(std::span<const double> alphas) {
  double s = 0;
  for (double a : alphas) s += std::log(a);
  return s;
}

LayerMask draw_mask(std::span<const double> alphas, Rng& rng) {
  LayerMask m;
  for (double a : alphas) m.insert.push_back(rng.uniform() < a);
  return m;
}

diff::Var relax_layer(diff::Var logits, std::size_t layer, const GumbelNoise& noise,
                      double tau) {
  require_tau(tau);
  g_relaxations.fetch_add(1, std::memory_order_relaxed);
  diff::Tape& tape = logits.tape();
  diff::Var alpha =
      diff::clamp(diff::sigmoid(diff::slice_rows(logits, layer, layer + 1)), kAlphaMin, kAlphaMax);
  diff::Var rest = diff::add_scalar(diff::scale(alpha, -1.0), 1.0);
  diff::Var parts[] = {diff::log(alpha), diff::log(rest)};
  diff::Var perturbed =
      diff::add(diff::concat(parts), tape.constant(Array({2}, {noise.z[0], noise.z[1]})));
  return diff::softmax(diff::scale(perturbed, 1.0 / tau), 0);
}

diff::Var sparse_penalty(diff::Var logits) {
  return diff::sum(diff::log(diff::clamp(diff::sigmoid(logits), kAlphaMin, kAlphaMax)));
}

GateState::GateState(std::size_t layers, GateConfig config, std::uint64_t seed,
                     std::size_t task)
    : config_(config),
      logits_{"gate.task" + std::to_string(task) + ".logits", Array({layers}, 0.0)},
      noise_rng_(derive_seed(seed, 2 * task)),
      mask_seed_(derive_seed(seed, 2 * task + 1)) {
  require_tau(config.tau);
  if (!(config.soft_phase_fraction >= 0.0 && config.soft_phase_fraction <= 1.0))
    throw std::invalid_argument("soft phase fraction must lie in [0, 1]");
}

double GateState::alpha(std::size_t layer) const {
  const double x = logits_.value[layer];
  const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  return std::clamp(s, kAlphaMin, kAlphaMax);
}

std::vector<double> GateState::alphas() const {
  std::vector<double> a(layers());
  for (std::size_t l = 0; l < a.size(); ++l) a[l] = alpha(l);
  return a;
}

std::size_t GateState::soft_epochs(std::size_t total) const {
  if (total == 0) return 0;
  const auto n = static_cast<std::size_t>(
      std::lround(config_.soft_phase_fraction * static_cast<double>(total)));
  return std::min(n, total);
}

std::vector<GumbelNoise> GateState::draw_noise() {
  std::vector<GumbelNoise> out;
  for (std::size_t l = 0; l < layers(); ++l) out.push_back(GumbelNoise::draw(noise_rng_));
  return out;
}

const LayerMask& GateState::sample_mask() {
  if (mask_) throw std::logic_error("layer mask already sampled for this task");
  Rng rng(mask_seed_);
  mask_ = draw_mask(alphas(), rng);
  return *mask_;
}

const LayerMask& GateState::fix_mask(LayerMask mask) {
  if (mask_) throw std::logic_error("layer mask already sampled for this task");
  if (mask.layers() != layers())
    throw std::invalid_argument("mask covers " + std::to_string(mask.layers()) + " layers, gate has " +
                                std::to_string(layers()));
  mask_ = std::move(mask);
  return *mask_;
}

}  // namespace rbwp::gate
