// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "rbwp/backbone/encoder.hpp"
#include "rbwp/diff/ops.hpp"
#include "rbwp/gate/layer_mask.hpp"
#include "rbwp/io/rng.hpp"

namespace rbwp::evolution {

using diff::Parameter;
using diff::Tape;
using diff::Var;

struct EvolutionDims {
  std::size_t layers = 5;
  std::size_t dim = 32;            // D
  std::size_t prompt_length = 20;  // L_p
  std::size_t proj_dim = 16;       // D_p, attention space
  std::size_t align_dim = 8;       // D_n, alignment bottleneck

  /// Requires D_p < D, D_n < D and an even, non-zero L_p.
  void validate() const;
};

/// Base prompts of every task seen so far, one L_p x D prompt per layer.
/// Only the newest task's prompts are trainable.
class BasePromptPool {
 public:
  explicit BasePromptPool(EvolutionDims dims);

  const EvolutionDims& dims() const noexcept { return dims_; }
  std::size_t task_count() const noexcept { return tasks_.size(); }

  /// Opens a new task with prompts uniform in [-0.03, 0.03]. The previous
  /// task must have been frozen.
  void add_task(Rng& rng);
  /// Freezes the newest task; its prompts are never written again.
  void freeze_current();
  bool current_trainable() const noexcept { return !tasks_.empty() && !tasks_.back().frozen; }

  const Parameter& prompt(std::size_t task, std::size_t layer) const;
  /// Mutable access to the newest task's prompt. Rejects frozen tasks.
  Parameter& current(std::size_t layer);

  /// Layer `l` of every task on the tape: frozen tasks as constants, the
  /// current task as a trainable leaf when `trainable`.
  std::vector<Var> bind_layer(Tape& tape, std::size_t layer, bool trainable) const;

 private:
  struct TaskPrompts {
    std::vector<Parameter> layers;
    bool frozen = false;
  };
  EvolutionDims dims_;
  std::deque<TaskPrompts> tasks_;
};

/// One learnable e^t per task; completed tasks' embeddings are immutable.
class TaskEmbeddings {
 public:
  explicit TaskEmbeddings(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return embeddings_.size(); }
  void add_task(Rng& rng);
  void freeze_current();
  bool current_trainable() const noexcept { return !embeddings_.empty() && !frozen_.back(); }

  const Parameter& at(std::size_t task) const { return embeddings_.at(task); }
  Parameter& current();
  Var bind(Tape& tape, std::size_t task, bool trainable) const;

 private:
  std::size_t dim_;
  std::deque<Parameter> embeddings_;
  std::vector<bool> frozen_;
};

struct LayerWeights {
  Parameter wq, wk, wv;  // D x D_p
  Parameter wo;          // D_p x D
  Parameter w1;          // D x D_n
  Parameter w2;          // D_n x D
  Parameter ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;  // D each

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
};

/// Per-layer projection and alignment matrices shared across tasks.
class EvolutionWeights {
 public:
  /// Matrices uniform in +-1/sqrt(fan_in); layer norms start at identity.
  static EvolutionWeights init(const EvolutionDims& dims, Rng& rng);

  const EvolutionDims& dims() const noexcept { return dims_; }
  std::size_t layers() const noexcept { return layers_.size(); }
  LayerWeights& layer(std::size_t l);
  const LayerWeights& layer(std::size_t l) const;
  std::vector<Parameter*> parameters();
  std::size_t parameter_count() const;

 private:
  EvolutionDims dims_;
  std::deque<LayerWeights> layers_;
};

/// Tape-bound view of one layer's weights.
struct LayerVars {
  Var wq, wk, wv, wo, w1, w2, ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  static LayerVars bind(Tape& tape, const EvolutionWeights& w, std::size_t layer,
                        bool trainable);
};

/// Result of a transform stage together with its row-stochastic matrices.
struct Stage {
  std::vector<Var> outputs;
  std::vector<Var> affinities;
};

struct Projection {
  Var query;               // L_p x D_p
  std::vector<Var> keys;   // per task, L_p x D_p
  std::vector<Var> values; // per task, L_p x D_p
};

/// Task conditioning: softmax(sigma(e) P_i^T / sqrt(D)) P_i per task slice,
/// where sigma(e) repeats e on every row. Every output row is therefore the
/// same convex combination of the slice's rows. Affinities are L_p x L_p.
Stage condition_on_task(std::span<const Var> pool, Var embedding);

Projection project_qkv(Var new_prompt, std::span<const Var> pool, const LayerVars& w);

/// Per task i: G_i = softmax_rows(Q K_i^T / sqrt(D_p)), output G_i V_i.
Stage task_level_transform(Var query, std::span<const Var> keys,
                           std::span<const Var> values);

/// Per task i: F_i = softmax_rows(Q^T K_i / sqrt(D_p)), output F_i Vt_i^T
/// (D_p x L_p).
Stage feature_level_transform(Var query, std::span<const Var> keys,
                              std::span<const Var> transformed);

/// LN(pool_i + hat_i^T W^O) for every task slice.
std::vector<Var> integrate_residual(std::span<const Var> pool, std::span<const Var> hat,
                                    const LayerVars& w);

/// LN(h_i + relu(h_i W^1) W^2) for every task slice.
std::vector<Var> task_guided_align(std::span<const Var> h, const LayerVars& w);

/// Mean of the aligned slices. Rejects an empty set.
Var aggregate_rainbow(std::span<const Var> aligned);

/// Intermediate affinity matrices of one evolve_layer call.
struct EvolutionTrace {
  std::vector<Array> conditioning;
  std::vector<Array> task_affinity;
  std::vector<Array> feature_affinity;
};

/// Full composition for one layer. `pool` holds every task's base prompt for
/// the layer, the newest last; the newest is also the query source.
Var evolve_layer(std::span<const Var> pool, Var embedding, const LayerVars& w,
                 EvolutionTrace* trace = nullptr);

/// Convenience form binding model state on the tape (as trainable leaves when
/// `trainable`). Rejects an out-of-range layer.
Var evolve_layer(Tape& tape, const BasePromptPool& pool, const TaskEmbeddings& embeddings,
                 const EvolutionWeights& weights, std::size_t layer, bool trainable,
                 EvolutionTrace* trace = nullptr);

/// Number of evolution operations executed by this process so far.
std::uint64_t operation_count() noexcept;

/// Stored unified prompts of finalized tasks, the only prompt state that
/// inference reads. Entries are written once.
class RainbowPromptSet {
 public:
  struct Entry {
    gate::LayerMask mask;
    /// One L_p x D prompt per layer; empty where the mask is false.
    std::vector<std::optional<Array>> prompts;

    std::optional<backbone::PrefixPair> prefix(std::size_t layer) const;
    bool bitwise_equal(const Entry& other) const;
  };

  std::size_t size() const noexcept { return entries_.size(); }
  bool contains(std::size_t task) const noexcept { return task < entries_.size(); }
  const Entry& entry(std::size_t task) const { return entries_.at(task); }
  /// Appends the entry of task size(); rejects any other task id.
  void store(std::size_t task, Entry entry);
  std::size_t parameter_count() const;

  /// Writes task_<i>.bin per task plus manifest.csv (task,file,mask).
  void save(const std::filesystem::path& dir) const;
  static RainbowPromptSet load(const std::filesystem::path& dir);

 private:
  std::vector<Entry> entries_;
};

/// Evolves every mask-selected layer with the current state and stores the
/// result for the newest task. Rejects a second finalize of the same task.
void finalize_task(RainbowPromptSet& set, const BasePromptPool& pool,
                   const TaskEmbeddings& embeddings, const EvolutionWeights& weights,
                   const gate::LayerMask& mask,
                   diff::Precision precision = diff::Precision::f64);

}  // namespace rbwp::evolution
