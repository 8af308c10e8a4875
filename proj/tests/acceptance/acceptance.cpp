// SPDX-License-Identifier: Apache-2.0
// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <unistd.h>

#include "../support/oracle.hpp"
#include "rbwp/cli/commands.hpp"
#include "rbwp/backbone/forward.hpp"
#include "rbwp/cli/config_file.hpp"
#include "rbwp/harness/gradient_suite.hpp"
#include "rbwp/harness/run.hpp"

using namespace rbwp;
using namespace rbwp::harness;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(int id, bool pass, const std::string& detail) {
  std::printf("criterion %d %s %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Gradient suite, 64-bit, max relative error below 1e-4 within 60 s.
void criterion_1() {
  const auto t0 = Clock::now();
  double worst = 0;
  std::string where;
  for (const auto& c : run_gradient_suite()) {
    if (c.report.max_relative_error >= worst) {
      worst = c.report.max_relative_error;
      where = c.name + ":" + c.report.worst_parameter;
    }
  }
  const double secs = seconds_since(t0);
  report(1, worst < 1e-4 && secs < 60.0,
         "gradient suite max relative error " + fmt("%.3g", worst) + " at " + where + " in " +
             fmt("%.2f", secs) + " s");
}

struct Toy {
  evolution::EvolutionDims dims;
  evolution::BasePromptPool pool;
  evolution::TaskEmbeddings emb;
  evolution::EvolutionWeights w;

  explicit Toy(std::uint64_t seed)
      : dims([] {
          evolution::EvolutionDims d;
          d.layers = 2;
          d.dim = 6;
          d.prompt_length = 4;
          d.proj_dim = 3;
          d.align_dim = 2;
          return d;
        }()),
        pool(dims),
        emb(dims.dim),
        w([&] {
          Rng r(seed);
          return evolution::EvolutionWeights::init(dims, r);
        }()) {
    Rng rng(seed + 1);
    for (auto* p : w.parameters())
      for (auto& v : p->value.values()) v = 0.5 * rng.normal();
    for (std::size_t l = 0; l < w.layers(); ++l)
      for (auto* p : {&w.layer(l).ln1_gamma, &w.layer(l).ln2_gamma})
        for (auto& v : p->value.values()) v += 1.0;
    for (std::size_t t = 0; t < 2; ++t) {
      if (t > 0) {
        pool.freeze_current();
        emb.freeze_current();
      }
      pool.add_task(rng);
      emb.add_task(rng);
      for (std::size_t l = 0; l < dims.layers; ++l)
        for (auto& v : pool.current(l).value.values()) v = rng.normal();
      for (auto& v : emb.current().value.values()) v = rng.normal();
    }
  }
};

oracle::EvoLayer plain(const evolution::LayerWeights& w) {
  return {oracle::from(w.wq.value),       oracle::from(w.wk.value),      oracle::from(w.wv.value),
          oracle::from(w.wo.value),       oracle::from(w.w1.value),      oracle::from(w.w2.value),
          oracle::vec(w.ln1_gamma.value), oracle::vec(w.ln1_beta.value),
          oracle::vec(w.ln2_gamma.value), oracle::vec(w.ln2_beta.value)};
}

// evolve_layer against the loop oracle for 20 seeds, 1e-10, within 10 s.
void criterion_2() {
  const auto t0 = Clock::now();
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Toy toy(1000 + seed);
    for (std::size_t l = 0; l < toy.dims.layers; ++l) {
      diff::Tape tape(diff::Precision::f64);
      const Array out = evolution::evolve_layer(tape, toy.pool, toy.emb, toy.w, l, false).value();
      std::vector<oracle::Mat> pool;
      for (std::size_t i = 0; i < 2; ++i) pool.push_back(oracle::from(toy.pool.prompt(i, l).value));
      const oracle::Mat expect =
          oracle::evolve(pool, oracle::vec(toy.emb.at(1).value), plain(toy.w.layer(l)));
      for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < out.cols(); ++c)
          worst = std::max(worst, std::abs(out.at(r, c) - expect[r][c]));
    }
  }
  const double secs = seconds_since(t0);
  report(2, worst <= 1e-10 && secs < 10.0,
         "20 seeds, max abs deviation from loop oracle " + fmt("%.3g", worst) + " in " +
             fmt("%.2f", secs) + " s");
}

double row_error(const Array& m) {
  double worst = 0;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double s = 0;
    for (double v : m.row(r)) s += v < 0 ? INFINITY : v;
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return worst;
}

// Row-stochastic affinities, gates summing to one, mask frequencies.
void criterion_3() {
  double affinity = 0;
  std::size_t matrices = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Toy toy(5000 + seed);
    for (std::size_t l = 0; l < toy.dims.layers; ++l) {
      diff::Tape tape(diff::Precision::f64);
      evolution::EvolutionTrace trace;
      evolution::evolve_layer(tape, toy.pool, toy.emb, toy.w, l, false, &trace);
      for (const auto* g : {&trace.conditioning, &trace.task_affinity, &trace.feature_affinity})
        for (const auto& m : *g) {
          affinity = std::max(affinity, row_error(m));
          ++matrices;
        }
    }
  }
  backbone::EncoderConfig ecfg;
  ecfg.layers = 2;
  ecfg.dim = 8;
  ecfg.heads = 2;
  ecfg.tokens = 5;
  ecfg.mlp_dim = 8;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto enc = backbone::Encoder::random(ecfg, seed);
    Rng rng(seed + 7);
    Array x({ecfg.patches(), ecfg.dim}), p({std::size_t{4}, ecfg.dim});
    for (double& v : x.values()) v = rng.normal();
    for (double& v : p.values()) v = rng.normal();
    diff::Tape tape(diff::Precision::f64);
    backbone::LayerPrefixes prefixes(ecfg.layers);
    prefixes[seed % ecfg.layers] = backbone::constant_prefix(tape, backbone::PrefixPair::split(p));
    std::vector<std::vector<Array>> probs;
    enc.encode(tape, std::vector<Array>{x}, prefixes, &probs);
    for (const auto& layer : probs)
      for (const auto& m : layer) {
        affinity = std::max(affinity, row_error(m));
        ++matrices;
      }
  }

  double gate_sum = 0;
  Rng rng(3);
  for (int i = 0; i < 10000; ++i) {
    const double a = rng.uniform(gate::kAlphaMin, gate::kAlphaMax);
    const auto g = gate::gumbel_relax({a, 1 - a}, gate::GumbelNoise::draw(rng), rng.uniform(0.05, 5.0));
    gate_sum = std::max(gate_sum, std::abs(g[0] + g[1] - 1.0));
  }

  double freq = 0;
  for (double a : {0.1, 0.3, 0.5, 0.75, 0.95}) {
    Rng mrng(static_cast<std::uint64_t>(a * 1000));
    const std::vector<double> alphas(5, a);
    std::vector<int> hits(5, 0);
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
      const auto m = gate::draw_mask(alphas, mrng);
      for (std::size_t l = 0; l < 5; ++l) hits[l] += m.insert[l];
    }
    for (int h : hits) freq = std::max(freq, std::abs(double(h) / n - a));
  }
  report(3, affinity < 1e-6 && gate_sum < 1e-9 && freq <= 0.01,
         std::to_string(matrices) + " affinity matrices, max row-sum error " + fmt("%.3g", affinity) +
             "; gate sum error " + fmt("%.3g", gate_sum) + "; mask frequency error " +
             fmt("%.4f", freq));
}

// Five-task runs per strategy, shared between criteria 4, 5, 6 and 8.
struct Trial {
  std::uint64_t seed;
  RunResult rainbow, fws, frozen;
};

cli::FileConfig default_config() {
  return cli::load_config(fs::path(RBWP_SOURCE_DIR) / "configs" / "default.ini");
}

void criteria_4_5_6_8() {
  const cli::FileConfig base = default_config();
  const auto t0 = Clock::now();
  std::vector<Trial> trials;
  bool perturb_ok = true;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    RunConfig cfg = base.run;
    cfg.scenario.seed = seed;
    cfg.precision = diff::Precision::f32;
    const auto encoder = backbone::Encoder::random(cfg.model.encoder(), cfg.model.encoder_seed);
    const Scenario scenario = build_scenario(cfg.scenario, cfg.model.patches, cfg.model.dim);
    const ScenarioQueries queries = compute_queries(encoder, scenario);
    Trial t{seed, {}, {}, {}};
    for (Strategy s : {Strategy::rainbow, Strategy::fixed_weighted_sum, Strategy::frozen_specific}) {
      cfg.strategy = s;
      Learner learner(cfg, encoder);
      RunResult r = run_scenario(learner, scenario, queries);
      if (s == Strategy::rainbow) {
        Rng rng(seed);
        for (auto* p : learner.evolution_weights().parameters())
          for (double& v : p->value.values()) v += rng.normal();
        perturb_ok = perturb_ok && predict_all(learner, scenario, queries) == r.final_predictions;
        t.rainbow = std::move(r);
      } else if (s == Strategy::fixed_weighted_sum) {
        t.fws = std::move(r);
      } else {
        t.frozen = std::move(r);
      }
    }
    const auto& m = t.rainbow.steps.back();
    std::printf("  seed %llu: rainbow A=%.4f F=%.4f div=%.4g | frozen_specific A=%.4f | "
                "fixed_weighted_sum F=%.4f div=%.4g\n",
                static_cast<unsigned long long>(seed), m.metrics.average_accuracy,
                m.metrics.forgetting, m.diversity.value_or(NAN),
                t.frozen.steps.back().metrics.average_accuracy,
                t.fws.steps.back().metrics.forgetting,
                t.fws.steps.back().diversity.value_or(NAN));
    std::fflush(stdout);
    trials.push_back(std::move(t));
  }
  const double secs = seconds_since(t0);

  std::size_t checks = 0, violations = 0;
  std::uint64_t ops = 0, relax = 0;
  for (const auto& t : trials)
    for (const RunResult* r : {&t.rainbow, &t.fws, &t.frozen}) {
      checks += r->immutability_checks;
      violations += r->immutability_violations.size();
      ops += r->inference_evolution_ops;
      relax += r->inference_relaxations;
    }
  report(4, checks > 0 && violations == 0 && ops == 0 && relax == 0,
         std::to_string(checks) + " finalize-time comparisons, " + std::to_string(violations) +
             " changed; inference evolution ops " + std::to_string(ops) + ", gate relaxations " +
             std::to_string(relax));

  int diverse = 0, accurate = 0, forgetting = 0;
  for (const auto& t : trials) {
    const auto rd = t.rainbow.steps.back().diversity, fd = t.fws.steps.back().diversity;
    diverse += rd && fd && *rd > *fd;
    accurate += t.rainbow.steps.back().metrics.average_accuracy >=
                t.frozen.steps.back().metrics.average_accuracy;
    forgetting += t.rainbow.steps.back().metrics.forgetting <=
                  t.fws.steps.back().metrics.forgetting + 0.02;
  }
  report(5, diverse >= 4 && secs < 600.0,
         "rainbow diversity above fixed_weighted_sum in " + std::to_string(diverse) + "/5 trials; " +
             fmt("%.0f", secs) + " s for all runs");
  report(6, accurate >= 4 && forgetting == 5 && secs < 600.0,
         "rainbow A >= frozen_specific A in " + std::to_string(accurate) +
             "/5; rainbow F <= fixed_weighted_sum F + 0.02 in " + std::to_string(forgetting) + "/5");

  bool economy = true;
  std::size_t trainable = 0, stored = 0;
  const ParameterReport& p = trials.front().rainbow.parameters;
  for (const auto& t : p.per_task) {
    economy = economy && t.trainable > t.stored;
    trainable += t.trainable;
    stored += t.stored;
  }
  economy = economy && stored == p.stored_prompts &&
            p.inference_total() == p.backbone + p.classifier + p.stored_prompts + p.task_embeddings;
  report(8, economy && perturb_ok,
         "inference touches backbone " + std::to_string(p.backbone) + " + classifier " +
             std::to_string(p.classifier) + " + stored prompts " + std::to_string(p.stored_prompts) +
             " + routing keys " + std::to_string(p.task_embeddings) + "; trainable per task " +
             std::to_string(p.per_task.front().trainable) + " > stored " +
             std::to_string(p.per_task.front().stored) + "; predictions after perturbing evolution " +
             (perturb_ok ? "unchanged" : "CHANGED"));
}

// Metric formulas on the hand example and on constant matrices.
void criterion_7() {
  AccuracyMatrix a(2);
  a.set(0, 0, 1.0);
  a.set(1, 0, 0.6);
  a.set(1, 1, 0.8);
  const Metrics m = metrics(a, 2);
  bool ok = m.average_accuracy == (0.6 + 0.8) / 2 && m.forgetting == 1.0 - 0.6;
  for (std::size_t n = 1; n <= 10; ++n) {
    for (double c : {0.0, 0.25, 0.8, 1.0}) {
      AccuracyMatrix k(n);
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t i = 0; i <= t; ++i) k.set(t, i, c);
      ok = ok && metrics(k, n).forgetting == 0.0;
    }
  }
  report(7, ok,
         "A_2 = " + fmt("%.17g", m.average_accuracy) + ", F_2 = " + fmt("%.17g", m.forgetting) +
             "; F = 0 on constant matrices up to N = 10");
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Two CLI runs with identical config and seed in 32-bit mode.
void criterion_9() {
  ::setenv("RBWP_PRECISION", "32", 1);
  const fs::path root = fs::temp_directory_path() / ("rbwp_accept_" + std::to_string(::getpid()));
  fs::remove_all(root);
  const fs::path cfg = fs::path(RBWP_SOURCE_DIR) / "configs" / "default.ini";
  std::ostringstream out, err;
  const int a = cli::run_command({cfg, 1, root / "a", {}}, out, err);
  const int b = cli::run_command({cfg, 1, root / "b", {}}, out, err);
  const std::string ma = slurp(root / "a" / "accuracy_matrix.csv");
  const std::string mb = slurp(root / "b" / "accuracy_matrix.csv");
  report(9, a == 0 && b == 0 && !ma.empty() && ma == mb,
         std::string("two runs of the default config, accuracy_matrix.csv ") +
             (ma == mb ? "bitwise identical" : "differs") + " (" + std::to_string(ma.size()) + " bytes)");
  fs::remove_all(root);
}

}  // namespace

int main() {
  try {
    criterion_1();
    criterion_2();
    criterion_3();
    criterion_7();
    criteria_4_5_6_8();
    criterion_9();
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 2;
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
