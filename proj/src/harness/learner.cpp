// SPDX-License-Identifier: Apache-2.0
#include "rbwp/harness/learner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "rbwp/backbone/forward.hpp"
#include "rbwp/harness/metrics.hpp"

namespace rbwp::harness {

namespace {

constexpr std::size_t kEvalChunk = 64;

enum Stream : std::uint64_t { kInit = 1, kShuffle = 2, kGate = 3, kEvolution = 4, kHead = 5 };

std::uint64_t task_seed(std::uint64_t base, Stream s, std::size_t task) {
  return derive_seed(derive_seed(base, s), task);
}

diff::PrefixRows split_rows(Var prompt, std::size_t half) {
  return {diff::slice_rows(prompt, 0, half), diff::slice_rows(prompt, half, 2 * half), half};
}

/// Per-sample prefix rows from a (B * L_p) x D stack of prompts.
diff::PrefixRows split_per_sample(Var stacked, std::size_t batch, std::size_t lp) {
  const std::size_t half = lp / 2;
  std::vector<std::size_t> keys, values;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t r = 0; r < half; ++r) {
      keys.push_back(b * lp + r);
      values.push_back(b * lp + half + r);
    }
  return {diff::gather_rows(stacked, keys), diff::gather_rows(stacked, values), half};
}

std::size_t argmax_row(const Array& logits, std::size_t r) {
  auto row = logits.row(r);
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

Array query_features(const backbone::Encoder& encoder, std::span<const Sample> samples) {
  Array out({samples.size(), encoder.config().dim});
  for (std::size_t start = 0; start < samples.size(); start += kEvalChunk) {
    const std::size_t end = std::min(samples.size(), start + kEvalChunk);
    std::vector<Array> inputs;
    for (std::size_t i = start; i < end; ++i) inputs.push_back(samples[i].input);
    const Array q = encoder.query_features(inputs);
    std::copy(q.storage().begin(), q.storage().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>(start * q.cols()));
  }
  return out;
}

Learner::Learner(const RunConfig& config, backbone::Encoder encoder)
    : config_(config),
      encoder_(std::move(encoder)),
      classifier_(config.model.dim),
      pool_(config.model.evolution()),
      embeddings_(config.model.dim),
      weights_([&] {
        Rng rng(derive_seed(config.scenario.seed, kEvolution));
        return evolution::EvolutionWeights::init(config.model.evolution(), rng);
      }()) {
  config_.validate();
  if (encoder_.config().dim != config.model.dim || encoder_.config().layers != config.model.layers)
    throw std::invalid_argument("encoder shape disagrees with the model config");
}

std::size_t Learner::current() const {
  if (!pool_.current_trainable()) throw std::logic_error("no task in progress");
  return pool_.task_count() - 1;
}

const gate::GateState* Learner::gate(std::size_t task) const {
  return task < gates_.size() ? &gates_[task] : nullptr;
}

void Learner::begin_task(const TaskData& task) {
  if (pool_.current_trainable()) throw std::logic_error("previous task has not ended");
  const std::size_t t = pool_.task_count();
  Rng init(task_seed(config_.scenario.seed, kInit, t));
  pool_.add_task(init);
  embeddings_.add_task(init);
  Rng head(task_seed(config_.scenario.seed, kHead, t));
  classifier_.add_block(task.classes.size(), head);
  if (classifier_.block_offset(t) != task.classes.front())
    throw std::invalid_argument("task classes must follow the classes of earlier tasks");
  gates_.emplace_back(config_.model.layers, config_.gate,
                      derive_seed(config_.scenario.seed, kGate), t);
  shuffle_rng_.emplace(task_seed(config_.scenario.seed, kShuffle, t));
  trainable_counts_.push_back(0);
  std::size_t n = 0;
  for (const auto* p : trainable_parameters(strategy() == Strategy::rainbow)) n += p->value.size();
  trainable_counts_.back() = n;
}

void Learner::fix_mask(gate::LayerMask mask) {
  if (strategy() != Strategy::rainbow) throw std::logic_error("only the rainbow strategy has a gate");
  gates_.at(current()).fix_mask(std::move(mask));
}

bool Learner::soft_phase(std::size_t epoch) const {
  if (strategy() != Strategy::rainbow) return false;
  const auto& g = gates_.at(current());
  return !g.mask() && epoch < g.soft_epochs(config_.loss.epochs_per_task);
}

Batch Learner::make_batch(std::span<const Sample> samples, const Array& queries,
                          std::span<const std::size_t> rows) const {
  const std::size_t offset = classifier_.block_offset(current());
  const std::size_t d = config_.model.dim;
  Batch b;
  b.queries = Array({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Sample& s = samples[rows[i]];
    b.inputs.push_back(s.input);
    if (s.label < offset || s.label >= offset + classifier_.block_size(current()))
      throw std::invalid_argument("sample label " + std::to_string(s.label) +
                                  " is not a class of the current task");
    b.labels.push_back(s.label);
    for (std::size_t j = 0; j < d; ++j) b.queries.at(i, j) = queries.at(rows[i], j);
  }
  return b;
}

std::vector<std::optional<diff::PrefixRows>> Learner::training_prefixes(
    Tape& tape, const Batch& batch, const std::vector<gate::GumbelNoise>* noise,
    std::optional<Var>& gate_logits) const {
  const std::size_t t = current(), L = config_.model.layers, lp = config_.model.prompt_length;
  std::vector<std::optional<diff::PrefixRows>> prefixes(L);
  switch (strategy()) {
    case Strategy::rainbow: {
      const auto& g = gates_[t];
      if (noise) {
        if (noise->size() != L) throw std::invalid_argument("gate noise must cover every layer");
        gate_logits = tape.parameter(g.logits());
      } else if (!g.mask()) {
        throw std::logic_error("hard gate phase needs a sampled mask");
      }
      for (std::size_t l = 0; l < L; ++l) {
        if (!noise && !g.mask()->insert[l]) continue;
        Var prompt = evolution::evolve_layer(tape, pool_, embeddings_, weights_, l, true);
        if (noise) {
          Var relaxed = gate::relax_layer(*gate_logits, l, (*noise)[l], g.tau());
          prompt = diff::scale_by(prompt, diff::slice_rows(relaxed, gate::kInsert, gate::kInsert + 1));
        }
        prefixes[l] = split_rows(prompt, lp / 2);
      }
      break;
    }
    case Strategy::frozen_specific: {
      for (std::size_t l = 0; l < L; ++l)
        prefixes[l] = split_rows(tape.parameter(pool_.prompt(t, l)), lp / 2);
      break;
    }
    case Strategy::fixed_weighted_sum: {
      const std::size_t B = batch.inputs.size();
      std::vector<Var> es;
      for (std::size_t i = 0; i <= t; ++i) es.push_back(embeddings_.bind(tape, i, true));
      std::vector<Var> cos;
      for (std::size_t b = 0; b < B; ++b) {
        Var q = tape.constant(Array({config_.model.dim},
                                    {batch.queries.row(b).begin(), batch.queries.row(b).end()}));
        for (std::size_t i = 0; i <= t; ++i) cos.push_back(diff::cosine_similarity(q, es[i]));
      }
      Var w = diff::softmax(diff::reshape(diff::concat(cos), {B, t + 1}), 1);
      for (std::size_t l = 0; l < L; ++l) {
        auto slices = pool_.bind_layer(tape, l, true);
        prefixes[l] = split_per_sample(diff::blend(w, slices), B, lp);
      }
      break;
    }
  }
  return prefixes;
}

Var Learner::match_term(Tape& tape, const Batch& batch) const {
  const std::size_t B = batch.inputs.size(), d = config_.model.dim;
  Var e = embeddings_.bind(tape, current(), true);
  Var total;
  for (std::size_t b = 0; b < B; ++b) {
    Var q = tape.constant(Array({d}, {batch.queries.row(b).begin(), batch.queries.row(b).end()}));
    Var m = matching_loss(q, e);
    total = b == 0 ? m : total + m;
  }
  return diff::scale(total, 1.0 / static_cast<double>(B));
}

LossTerms Learner::loss(Tape& tape, const Batch& batch,
                        const std::vector<gate::GumbelNoise>* noise) const {
  if (batch.inputs.empty()) throw std::invalid_argument("empty batch");
  if (noise && strategy() != Strategy::rainbow)
    throw std::logic_error("only the rainbow strategy has a soft gate phase");
  std::optional<Var> gate_logits;
  auto prefixes = training_prefixes(tape, batch, noise, gate_logits);
  Var feats = encoder_.encode(tape, batch.inputs, prefixes);
  LossTerms terms;
  terms.ce = diff::cross_entropy(classifier_.training_logits(tape, feats, current()), batch.labels);
  terms.match = match_term(tape, batch);
  terms.total = terms.ce + diff::scale(terms.match, config_.loss.lambda_match);
  if (gate_logits) {
    terms.sparse = gate::sparse_penalty(*gate_logits);
    terms.total = terms.total + diff::scale(*terms.sparse, config_.loss.lambda_sparse);
  }
  return terms;
}

std::vector<Parameter*> Learner::trainable_parameters(bool soft) {
  const std::size_t t = current();
  std::vector<Parameter*> out;
  for (std::size_t l = 0; l < config_.model.layers; ++l) out.push_back(&pool_.current(l));
  out.push_back(&embeddings_.current());
  if (strategy() == Strategy::rainbow) {
    for (auto* p : weights_.parameters()) out.push_back(p);
    if (soft) out.push_back(&gates_[t].logits());
  }
  out.push_back(&classifier_.weights(t));
  out.push_back(&classifier_.bias(t));
  return out;
}

void Learner::sgd_step(const diff::Gradients& grads, std::span<Parameter* const> params) {
  const double lr = config_.loss.learning_rate;
  const bool f32 = config_.precision == diff::Precision::f32;
  for (Parameter* p : params) {
    if (!grads.contains(*p)) continue;
    const Array& g = grads.of(*p);
    for (std::size_t i = 0; i < g.size(); ++i) {
      double v = p->value[i] - lr * g[i];
      if (f32) v = static_cast<double>(static_cast<float>(v));
      p->value[i] = v;
    }
  }
}

EpochLog Learner::train_epoch(std::span<const Sample> train, const Array& queries,
                              std::size_t epoch) {
  const std::size_t t = current();
  if (queries.rows() != train.size())
    throw std::invalid_argument("query rows must match the training samples");
  auto& g = gates_[t];
  if (strategy() == Strategy::rainbow && !g.mask() && !soft_phase(epoch)) g.sample_mask();
  const bool soft = soft_phase(epoch);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle_rng_->shuffle(order);

  EpochLog log;
  log.task = t;
  log.epoch = epoch;
  log.soft = soft;
  const std::size_t bs = config_.loss.batch_size;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < order.size(); start += bs) {
    const std::size_t end = std::min(order.size(), start + bs);
    const Batch batch = make_batch(train, queries,
                                   std::span(order).subspan(start, end - start));
    std::vector<gate::GumbelNoise> noise;
    if (soft) noise = g.draw_noise();
    Tape tape(config_.precision);
    LossTerms terms = loss(tape, batch, soft ? &noise : nullptr);
    const double total = terms.total.value().item();
    if (!std::isfinite(total))
      throw NumericalError("non-finite training loss at task " + std::to_string(t + 1) +
                           ", epoch " + std::to_string(epoch + 1));
    log.ce += terms.ce.value().item();
    log.match += terms.match.value().item();
    log.sparse += terms.sparse ? terms.sparse->value().item()
                               : gate::sparse_penalty(std::span<const double>(g.alphas()));
    const auto params = trainable_parameters(soft);
    sgd_step(tape.backward(terms.total), params);
    ++batches;
  }
  log.ce /= static_cast<double>(batches);
  log.match /= static_cast<double>(batches);
  log.sparse /= static_cast<double>(batches);
  if (strategy() == Strategy::rainbow) log.alphas = g.alphas();
  else log.sparse = 0.0;
  return log;
}

void Learner::end_task() {
  const std::size_t t = current();
  const std::size_t L = config_.model.layers;
  if (strategy() == Strategy::rainbow) {
    auto& g = gates_[t];
    if (!g.mask()) g.sample_mask();
    evolution::finalize_task(prompts_, pool_, embeddings_, weights_, *g.mask(), config_.precision);
  } else {
    evolution::RainbowPromptSet::Entry entry{gate::LayerMask::all(L, true), {}};
    for (std::size_t l = 0; l < L; ++l) entry.prompts.emplace_back(pool_.prompt(t, l).value);
    prompts_.store(t, std::move(entry));
  }
  const auto& entry = prompts_.entry(t);
  const auto last = entry.mask.last_selected();
  stored_diversity_.push_back(last ? std::optional<double>(nuclear_norm(*entry.prompts[*last]))
                                   : std::nullopt);
  pool_.freeze_current();
  embeddings_.freeze_current();
  classifier_.freeze_block(t);
  shuffle_rng_.reset();
}

Prediction Learner::predict(std::span<const Sample> samples, const Array& queries) const {
  const std::size_t n_tasks = prompts_.size();
  if (n_tasks == 0) throw std::logic_error("predict needs at least one finalized task");
  if (queries.rows() != samples.size())
    throw std::invalid_argument("query rows must match the samples");
  const std::size_t L = config_.model.layers, lp = config_.model.prompt_length;
  Prediction out;
  out.classes.resize(samples.size());
  out.tasks.resize(samples.size());
  out.diversity.resize(samples.size());

  std::vector<Array> keys;
  for (std::size_t i = 0; i < n_tasks; ++i) keys.push_back(embeddings_.at(i).value);

  if (strategy() == Strategy::fixed_weighted_sum) {
    for (std::size_t start = 0; start < samples.size(); start += kEvalChunk) {
      const std::size_t end = std::min(samples.size(), start + kEvalChunk), B = end - start;
      Tape tape(config_.precision);
      std::vector<Array> inputs;
      std::vector<Array> blended(L, Array({B * lp, config_.model.dim}, 0.0));
      for (std::size_t b = 0; b < B; ++b) {
        const std::size_t s = start + b;
        inputs.push_back(samples[s].input);
        const auto w = task_weights(queries.row(s), keys);
        out.tasks[s] = static_cast<std::size_t>(std::max_element(w.begin(), w.end()) - w.begin());
        for (std::size_t l = 0; l < L; ++l)
          for (std::size_t i = 0; i < n_tasks; ++i) {
            const Array& p = *prompts_.entry(i).prompts[l];
            for (std::size_t k = 0; k < p.size(); ++k) blended[l][b * p.size() + k] += w[i] * p[k];
          }
        Array last({lp, config_.model.dim});
        std::copy_n(blended[L - 1].values().begin() + static_cast<std::ptrdiff_t>(b * last.size()),
                    last.size(), last.values().begin());
        out.diversity[s] = nuclear_norm(last);
      }
      backbone::LayerPrefixes prefixes(L);
      for (std::size_t l = 0; l < L; ++l)
        prefixes[l] = split_per_sample(tape.constant(blended[l]), B, lp);
      const Array logits = backbone::forward(tape, encoder_, classifier_, inputs, prefixes).value();
      for (std::size_t b = 0; b < B; ++b) out.classes[start + b] = argmax_row(logits, b);
    }
    return out;
  }

  std::vector<std::vector<std::size_t>> groups(n_tasks);
  for (std::size_t s = 0; s < samples.size(); ++s) {
    out.tasks[s] = select_task(queries.row(s), keys);
    out.diversity[s] = stored_diversity_[out.tasks[s]];
    groups[out.tasks[s]].push_back(s);
  }
  for (std::size_t task = 0; task < n_tasks; ++task) {
    const auto& entry = prompts_.entry(task);
    const auto& rows = groups[task];
    for (std::size_t start = 0; start < rows.size(); start += kEvalChunk) {
      const std::size_t end = std::min(rows.size(), start + kEvalChunk);
      Tape tape(config_.precision);
      backbone::LayerPrefixes prefixes(L);
      for (std::size_t l = 0; l < L; ++l)
        if (auto pair = entry.prefix(l)) prefixes[l] = backbone::constant_prefix(tape, *pair);
      std::vector<Array> inputs;
      for (std::size_t i = start; i < end; ++i) inputs.push_back(samples[rows[i]].input);
      const Array logits = backbone::forward(tape, encoder_, classifier_, inputs, prefixes).value();
      for (std::size_t i = start; i < end; ++i) out.classes[rows[i]] = argmax_row(logits, i - start);
    }
  }
  return out;
}

ParameterReport Learner::parameter_report() const {
  ParameterReport r;
  r.backbone = encoder_.parameter_count();
  for (std::size_t b = 0; b < classifier_.block_count(); ++b)
    r.classifier += classifier_.weights(b).value.size() + classifier_.bias(b).value.size();
  r.stored_prompts = prompts_.parameter_count();
  for (std::size_t i = 0; i < embeddings_.size(); ++i) r.task_embeddings += embeddings_.at(i).value.size();
  if (strategy() == Strategy::rainbow) {
    r.evolution = weights_.parameter_count();
    for (std::size_t t = 0; t < pool_.task_count(); ++t)
      for (std::size_t l = 0; l < config_.model.layers; ++l) r.base_prompts += pool_.prompt(t, l).value.size();
    for (const auto& g : gates_) r.gate_logits += g.logits().value.size();
  }
  for (std::size_t t = 0; t < prompts_.size(); ++t) {
    std::size_t stored = 0;
    for (const auto& p : prompts_.entry(t).prompts)
      if (p) stored += p->size();
    r.per_task.push_back({trainable_counts_.at(t), stored});
  }
  return r;
}

}  // namespace rbwp::harness
