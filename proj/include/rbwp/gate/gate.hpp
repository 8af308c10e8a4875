// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "rbwp/diff/ops.hpp"
#include "rbwp/gate/layer_mask.hpp"
#include "rbwp/io/rng.hpp"

namespace rbwp::gate {

inline constexpr double kAlphaMin = 1e-3;
inline constexpr double kAlphaMax = 1.0 - 1e-3;

/// Index of the relaxed gate component that means "insert". It is the
/// component whose distribution entry is alpha in delta = [alpha, 1 - alpha].
inline constexpr std::size_t kInsert = 0;

/// Gumbel perturbations for the two gate outcomes.
struct GumbelNoise {
  std::array<double, 2> z{0.0, 0.0};

  /// Z = -log(-log U) with U uniform on (0, 1).
  static double from_uniform(double u);
  static GumbelNoise draw(Rng& rng);
};

/// ghat(p) = exp((log delta(p) + Z(p)) / tau) / sum_i exp((log delta(i) + Z(i)) / tau).
/// Rejects tau <= 0 and delta entries outside (0, 1].
std::array<double, 2> gumbel_relax(std::array<double, 2> delta, const GumbelNoise& noise,
                                   double tau);

/// sum_l log alpha_l.
double sparse_penalty(std::span<const double> alphas);

/// Bernoulli(alpha_l) insert decision per layer.
LayerMask draw_mask(std::span<const double> alphas, Rng& rng);

/// Differentiable relaxation of one layer on a tape: returns the two gate
/// components as a length-2 array. `logits` holds one free logit per layer.
diff::Var relax_layer(diff::Var logits, std::size_t layer, const GumbelNoise& noise,
                      double tau);

/// sum_l log clamp(sigmoid(logits_l)) on a tape.
diff::Var sparse_penalty(diff::Var logits);

/// Number of gate relaxations executed by this process so far.
std::uint64_t relax_count() noexcept;

struct GateConfig {
  double tau = 1.0;
  double soft_phase_fraction = 0.6;
};

/// Learnable insertion gate of one task.
class GateState {
 public:
  /// Logits start at 0 (alpha = 0.5). `seed` drives noise and mask sampling.
  GateState(std::size_t layers, GateConfig config, std::uint64_t seed, std::size_t task);

  std::size_t layers() const noexcept { return logits_.value.size(); }
  const GateConfig& config() const noexcept { return config_; }
  double tau() const noexcept { return config_.tau; }

  diff::Parameter& logits() { return logits_; }
  const diff::Parameter& logits() const { return logits_; }

  /// sigmoid(logit) clamped to [kAlphaMin, kAlphaMax].
  double alpha(std::size_t layer) const;
  std::vector<double> alphas() const;

  /// Epochs of the soft phase out of `total`, rounded to nearest.
  std::size_t soft_epochs(std::size_t total) const;

  /// Fresh noise for every layer from the task's training stream.
  std::vector<GumbelNoise> draw_noise();

  /// Samples the task's mask once from its own seeded generator.
  const LayerMask& sample_mask();
  /// Fixes the mask directly instead of sampling it. Written once, like
  /// sample_mask.
  const LayerMask& fix_mask(LayerMask mask);
  const std::optional<LayerMask>& mask() const noexcept { return mask_; }

 private:
  GateConfig config_;
  diff::Parameter logits_;
  Rng noise_rng_;
  std::uint64_t mask_seed_;
  std::optional<LayerMask> mask_;
};

}  // namespace rbwp::gate
