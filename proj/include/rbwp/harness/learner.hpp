// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <deque>
#include <optional>
#include <span>
#include <vector>

#include "rbwp/backbone/classifier.hpp"
#include "rbwp/backbone/encoder.hpp"
#include "rbwp/evolution/evolution.hpp"
#include "rbwp/gate/gate.hpp"
#include "rbwp/harness/config.hpp"
#include "rbwp/harness/scenario.hpp"

namespace rbwp::harness {

using diff::Parameter;
using diff::Tape;
using diff::Var;

/// One minibatch with precomputed query features and global class labels of
/// the current task.
struct Batch {
  std::vector<Array> inputs;
  Array queries;  // B x D
  std::vector<std::size_t> labels;
};

struct LossTerms {
  Var total;
  Var ce;
  Var match;
  std::optional<Var> sparse;  // soft gate phase only
};

struct EpochLog {
  std::size_t task = 0;
  std::size_t epoch = 0;
  bool soft = false;
  double ce = 0.0;
  double sparse = 0.0;
  double match = 0.0;
  std::vector<double> alphas;
};

struct Prediction {
  std::vector<std::size_t> classes;
  /// Task whose prompts were used; for the weighted sum, the heaviest task.
  std::vector<std::size_t> tasks;
  /// Nuclear norm of the deepest inserted prompt per sample, if any.
  std::vector<std::optional<double>> diversity;
};

struct TaskParameterCount {
  std::size_t trainable = 0;  // every parameter optimized while training the task
  std::size_t stored = 0;     // prompt values kept for inference
};

struct ParameterReport {
  std::size_t backbone = 0;
  std::size_t classifier = 0;
  std::size_t stored_prompts = 0;
  std::size_t task_embeddings = 0;
  std::size_t evolution = 0;     // discarded after training
  std::size_t base_prompts = 0;  // discarded after training (rainbow)
  std::size_t gate_logits = 0;   // discarded after training
  std::vector<TaskParameterCount> per_task;

  std::size_t inference_total() const {
    return backbone + classifier + stored_prompts + task_embeddings;
  }
};

/// Continual learner holding every piece of model state for one strategy.
/// Training mutates only the current task's parameters and the shared
/// evolution weights.
class Learner {
 public:
  Learner(const RunConfig& config, backbone::Encoder encoder);

  const RunConfig& config() const noexcept { return config_; }
  Strategy strategy() const noexcept { return config_.strategy; }
  std::size_t task_count() const noexcept { return pool_.task_count(); }
  std::size_t finalized() const noexcept { return prompts_.size(); }

  /// Opens task `task_count()`: base prompt, embedding, gate and classifier
  /// block. The previous task must have ended.
  void begin_task(const TaskData& task);
  /// One pass over the training set. `queries` row i belongs to train[i].
  EpochLog train_epoch(std::span<const Sample> train, const Array& queries, std::size_t epoch);
  /// Fixes the mask (if not yet sampled), stores the task's prompts and
  /// freezes its state.
  void end_task();

  /// Ends the soft phase of the current rainbow task with a given mask.
  void fix_mask(gate::LayerMask mask);
  /// Whether the next rainbow step runs with soft gates.
  bool soft_phase(std::size_t epoch) const;

  Batch make_batch(std::span<const Sample> samples, const Array& queries,
                   std::span<const std::size_t> rows) const;
  /// Composite loss of the current task. `noise` selects the soft gate
  /// phase and is required for it; without it the sampled mask is used.
  LossTerms loss(Tape& tape, const Batch& batch,
                 const std::vector<gate::GumbelNoise>* noise) const;
  /// Parameters optimized in the current step.
  std::vector<Parameter*> trainable_parameters(bool soft);

  /// Prompted prediction over every class seen so far, using only stored
  /// state: encoder, classifier, stored prompts and task embeddings.
  Prediction predict(std::span<const Sample> samples, const Array& queries) const;

  const backbone::Encoder& encoder() const noexcept { return encoder_; }
  const backbone::Classifier& classifier() const noexcept { return classifier_; }
  const evolution::BasePromptPool& pool() const noexcept { return pool_; }
  const evolution::TaskEmbeddings& embeddings() const noexcept { return embeddings_; }
  const evolution::RainbowPromptSet& prompts() const noexcept { return prompts_; }
  evolution::EvolutionWeights& evolution_weights() noexcept { return weights_; }
  const gate::GateState* gate(std::size_t task) const;
  /// Mask stored for a finalized task.
  const gate::LayerMask& mask(std::size_t task) const { return prompts_.entry(task).mask; }

  ParameterReport parameter_report() const;

 private:
  std::size_t current() const;
  std::vector<std::optional<diff::PrefixRows>> training_prefixes(
      Tape& tape, const Batch& batch, const std::vector<gate::GumbelNoise>* noise,
      std::optional<Var>& gate_logits) const;
  Var match_term(Tape& tape, const Batch& batch) const;
  void sgd_step(const diff::Gradients& grads, std::span<Parameter* const> params);

  RunConfig config_;
  backbone::Encoder encoder_;
  backbone::Classifier classifier_;
  evolution::BasePromptPool pool_;
  evolution::TaskEmbeddings embeddings_;
  evolution::EvolutionWeights weights_;
  evolution::RainbowPromptSet prompts_;
  std::deque<gate::GateState> gates_;
  std::vector<std::optional<double>> stored_diversity_;
  std::vector<std::size_t> trainable_counts_;
  std::optional<Rng> shuffle_rng_;
};

/// Query features of a sample set, one row per sample.
Array query_features(const backbone::Encoder& encoder, std::span<const Sample> samples);

}  // namespace rbwp::harness
