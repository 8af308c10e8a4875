// SPDX-License-Identifier: Apache-2.0
#include "rbwp/harness/run.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "rbwp/io/snapshot.hpp"

namespace rbwp::harness {

namespace fs = std::filesystem;

namespace {

struct Frozen {
  std::size_t task;
  evolution::RainbowPromptSet::Entry entry;
  Array embedding;
  Array weights, bias;
};

Frozen capture(const Learner& learner, std::size_t task) {
  return {task, learner.prompts().entry(task), learner.embeddings().at(task).value,
          learner.classifier().weights(task).value, learner.classifier().bias(task).value};
}

void verify(const Learner& learner, const Frozen& f, RunResult& r, std::size_t step) {
  const std::string where = " of task " + std::to_string(f.task + 1) + " changed by step " +
                            std::to_string(step + 1);
  ++r.immutability_checks;
  if (!learner.prompts().entry(f.task).bitwise_equal(f.entry))
    r.immutability_violations.push_back("stored prompts or mask" + where);
  if (!learner.embeddings().at(f.task).value.bitwise_equal(f.embedding))
    r.immutability_violations.push_back("task embedding" + where);
  if (!learner.classifier().weights(f.task).value.bitwise_equal(f.weights) ||
      !learner.classifier().bias(f.task).value.bitwise_equal(f.bias))
    r.immutability_violations.push_back("classifier rows" + where);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string accuracy_csv(const AccuracyMatrix& a, std::size_t n) {
  std::ostringstream s;
  s << "step";
  for (std::size_t i = 0; i < a.tasks(); ++i) s << ",task_" << i + 1;
  s << '\n';
  for (std::size_t t = 0; t < n; ++t) {
    s << t + 1;
    for (std::size_t i = 0; i < a.tasks(); ++i) {
      s << ',';
      if (auto v = a.get(t, i)) s << format_real(*v);
    }
    s << '\n';
  }
  return s.str();
}

std::string metrics_csv(const std::vector<StepRecord>& steps) {
  std::ostringstream s;
  s << "step,A,F,diversity\n";
  for (const auto& r : steps)
    s << r.step << ',' << format_real(r.metrics.average_accuracy) << ','
      << (r.metrics.forgetting_defined ? format_real(r.metrics.forgetting) : "NA") << ','
      << (r.diversity ? format_real(*r.diversity) : "NA") << '\n';
  return s.str();
}

std::string parameters_csv(const ParameterReport& p) {
  std::ostringstream s;
  s << "component,count,used_at_inference\n"
    << "backbone," << p.backbone << ",1\n"
    << "classifier," << p.classifier << ",1\n"
    << "stored_prompts," << p.stored_prompts << ",1\n"
    << "task_embeddings," << p.task_embeddings << ",1\n"
    << "evolution_weights," << p.evolution << ",0\n"
    << "base_prompts," << p.base_prompts << ",0\n"
    << "gate_logits," << p.gate_logits << ",0\n";
  for (std::size_t t = 0; t < p.per_task.size(); ++t)
    s << "task_" << t + 1 << "_trainable," << p.per_task[t].trainable << ",0\n"
      << "task_" << t + 1 << "_stored," << p.per_task[t].stored << ",1\n";
  return s.str();
}

}  // namespace

std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string events_line(const EpochLog& log) {
  std::ostringstream s;
  s << "task=" << log.task + 1 << " epoch=" << log.epoch + 1
    << " phase=" << (log.soft ? "soft" : "hard") << " ce=" << format_real(log.ce)
    << " sparse=" << format_real(log.sparse) << " match=" << format_real(log.match) << " alpha=";
  for (std::size_t l = 0; l < log.alphas.size(); ++l)
    s << (l ? "," : "") << format_real(log.alphas[l]);
  if (log.alphas.empty()) s << "NA";
  return s.str();
}

ScenarioQueries compute_queries(const backbone::Encoder& encoder, const Scenario& scenario) {
  ScenarioQueries q;
  for (const auto& t : scenario.tasks) {
    q.train.push_back(query_features(encoder, t.train));
    q.test.push_back(query_features(encoder, t.test));
  }
  return q;
}

std::vector<std::vector<std::size_t>> predict_all(const Learner& learner, const Scenario& scenario,
                                                  const ScenarioQueries& queries) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < learner.finalized(); ++i)
    out.push_back(learner.predict(scenario.tasks[i].test, queries.test[i]).classes);
  return out;
}

RunResult run_scenario(Learner& learner, const Scenario& scenario, const ScenarioQueries& queries,
                       const std::optional<fs::path>& out_dir) {
  const std::size_t T = scenario.tasks.size();
  if (learner.task_count() != 0) throw std::logic_error("run_scenario needs a fresh learner");
  RunResult r;
  r.strategy = to_string(learner.strategy());
  r.scenario_fingerprint = scenario.fingerprint();
  r.accuracy = AccuracyMatrix(T);

  std::ofstream events;
  if (out_dir) {
    fs::create_directories(*out_dir);
    const auto snap = learner.encoder().snapshot();
    io::write_snapshot(*out_dir / "encoder.bin", snap);
    events.open(*out_dir / "events.log");
  }

  std::vector<Frozen> frozen;
  const std::size_t epochs = learner.config().loss.epochs_per_task;
  for (std::size_t t = 0; t < T; ++t) {
    const TaskData& task = scenario.tasks[t];
    learner.begin_task(task);
    for (std::size_t e = 0; e < epochs; ++e) {
      try {
        const EpochLog log = learner.train_epoch(task.train, queries.train[t], e);
        if (events) events << events_line(log) << '\n' << std::flush;
      } catch (const NumericalError& err) {
        if (out_dir) {
          events << "task=" << t + 1 << " epoch=" << e + 1 << " abort: " << err.what() << '\n'
                 << std::flush;
          std::vector<io::NamedArray> diag;
          for (const auto* p : learner.trainable_parameters(learner.soft_phase(e)))
            diag.push_back({p->name, p->value});
          io::write_snapshot(*out_dir / "diagnostic.bin", diag);
        }
        throw;
      }
    }
    learner.end_task();
    for (const auto& f : frozen) verify(learner, f, r, t);
    frozen.push_back(capture(learner, t));

    const auto ops = evolution::operation_count();
    const auto relax = gate::relax_count();
    std::vector<std::optional<double>> diversity;
    for (std::size_t i = 0; i <= t; ++i) {
      const Prediction p = learner.predict(scenario.tasks[i].test, queries.test[i]);
      std::size_t hit = 0;
      for (std::size_t k = 0; k < p.classes.size(); ++k)
        hit += p.classes[k] == scenario.tasks[i].test[k].label;
      r.accuracy.set(t, i, static_cast<double>(hit) / static_cast<double>(p.classes.size()));
      diversity.insert(diversity.end(), p.diversity.begin(), p.diversity.end());
      if (t + 1 == T) r.final_predictions.push_back(p.classes);
    }
    r.inference_evolution_ops += evolution::operation_count() - ops;
    r.inference_relaxations += gate::relax_count() - relax;
    r.steps.push_back({t + 1, metrics(r.accuracy, t + 1), mean_present(diversity)});
  }
  r.parameters = learner.parameter_report();

  if (out_dir) {
    learner.prompts().save(*out_dir / "prompts");
    write_text(*out_dir / "accuracy_matrix.csv", accuracy_csv(r.accuracy, T));
    write_text(*out_dir / "metrics.csv", metrics_csv(r.steps));
    write_text(*out_dir / "parameters.csv", parameters_csv(r.parameters));
  }
  return r;
}

}  // namespace rbwp::harness
