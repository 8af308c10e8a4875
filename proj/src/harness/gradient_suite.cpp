// SPDX-License-Identifier: Apache-2.0
#include "rbwp/harness/gradient_suite.hpp"

#include <numeric>

#include "rbwp/harness/learner.hpp"

namespace rbwp::harness {

namespace {

RunConfig suite_config(Strategy strategy) {
  RunConfig c;
  c.scenario.tasks = 2;
  c.scenario.classes_per_task = 2;
  c.scenario.samples_per_class = 5;
  c.scenario.seed = 11;
  c.model.layers = 3;
  c.model.dim = 8;
  c.model.heads = 2;
  c.model.patches = 4;
  c.model.mlp_dim = 8;
  c.model.prompt_length = 4;
  c.model.proj_dim = 4;
  c.model.align_dim = 4;
  c.model.encoder_seed = 5;
  c.loss.epochs_per_task = 2;
  c.loss.batch_size = 4;
  c.strategy = strategy;
  c.precision = diff::Precision::f64;
  return c;
}

diff::GradCheckReport check(Learner& learner, const Batch& batch,
                            const std::vector<gate::GumbelNoise>* noise, bool corrupt) {
  diff::GradCheckOptions opts;
  if (corrupt) {
    opts.tamper_analytic = [done = false](const diff::Parameter&, Array& g) mutable {
      if (done || g.size() == 0) return;
      g[0] += 1e-2;
      done = true;
    };
  }
  const auto params = learner.trainable_parameters(noise != nullptr);
  return diff::grad_check(
      [&](diff::Tape& tape) { return learner.loss(tape, batch, noise).total; }, params, opts);
}

}  // namespace

std::vector<GradientCase> run_gradient_suite(const GradientSuiteOptions& options) {
  std::vector<GradientCase> out;
  for (Strategy s : {Strategy::rainbow, Strategy::fixed_weighted_sum, Strategy::frozen_specific}) {
    const RunConfig cfg = suite_config(s);
    const auto encoder = backbone::Encoder::random(cfg.model.encoder(), cfg.model.encoder_seed);
    const Scenario scenario = build_scenario(cfg.scenario, cfg.model.patches, cfg.model.dim);
    Learner learner(cfg, encoder);

    const TaskData& first = scenario.tasks[0];
    learner.begin_task(first);
    const Array q0 = query_features(encoder, first.train);
    for (std::size_t e = 0; e < cfg.loss.epochs_per_task; ++e) learner.train_epoch(first.train, q0, e);
    learner.end_task();

    const TaskData& second = scenario.tasks[1];
    learner.begin_task(second);
    const Array q1 = query_features(encoder, second.train);
    std::vector<std::size_t> rows(cfg.loss.batch_size);
    std::iota(rows.begin(), rows.end(), 0);
    const Batch batch = learner.make_batch(second.train, q1, rows);

    if (s == Strategy::rainbow) {
      Rng rng(derive_seed(cfg.scenario.seed, 99));
      std::vector<gate::GumbelNoise> noise;
      for (std::size_t l = 0; l < cfg.model.layers; ++l) noise.push_back(gate::GumbelNoise::draw(rng));
      out.push_back({"rainbow/soft", check(learner, batch, &noise, options.corrupt)});
      learner.fix_mask(gate::LayerMask::all(cfg.model.layers, true));
      out.push_back({"rainbow/hard", check(learner, batch, nullptr, options.corrupt)});
    } else {
      out.push_back({to_string(s), check(learner, batch, nullptr, options.corrupt)});
    }
  }
  return out;
}

}  // namespace rbwp::harness
