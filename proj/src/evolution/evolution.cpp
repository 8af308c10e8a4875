// SPDX-License-Identifier: Apache-2.0
#include "rbwp/evolution/evolution.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "rbwp/io/snapshot.hpp"

namespace rbwp::evolution {

namespace {

std::atomic<std::uint64_t> g_operations{0};

void count() { g_operations.fetch_add(1, std::memory_order_relaxed); }

Array uniform(Shape shape, double bound, Rng& rng) {
  Array a(std::move(shape));
  for (auto& v : a.values()) v = rng.uniform(-bound, bound);
  return a;
}

void require_nonempty(std::span<const Var> s, const char* op) {
  if (s.empty()) throw std::invalid_argument(std::string(op) + ": no task slices");
}

}  // namespace

std::uint64_t operation_count() noexcept {
  return g_operations.load(std::memory_order_relaxed);
}

void EvolutionDims::validate() const {
  if (layers == 0) throw std::invalid_argument("evolution needs at least one layer");
  if (prompt_length == 0 || prompt_length % 2 != 0)
    throw std::invalid_argument("prompt length must be even and positive, got " +
                                std::to_string(prompt_length));
  if (proj_dim == 0 || proj_dim >= dim)
    throw std::invalid_argument("projection dimension must lie in [1, " +
                                std::to_string(dim) + ")");
  if (align_dim == 0 || align_dim >= dim)
    throw std::invalid_argument("alignment dimension must lie in [1, " +
                                std::to_string(dim) + ")");
}

// ---- BasePromptPool -------------------------------------------------------

BasePromptPool::BasePromptPool(EvolutionDims dims) : dims_(dims) { dims_.validate(); }

void BasePromptPool::add_task(Rng& rng) {
  if (current_trainable())
    throw std::logic_error("base prompt pool: previous task still trainable");
  TaskPrompts t;
  const std::size_t id = tasks_.size();
  for (std::size_t l = 0; l < dims_.layers; ++l)
    t.layers.push_back({"base_prompt.task" + std::to_string(id) + ".layer" +
                            std::to_string(l),
                        uniform({dims_.prompt_length, dims_.dim}, 0.03, rng)});
  tasks_.push_back(std::move(t));
}

void BasePromptPool::freeze_current() {
  if (tasks_.empty()) throw std::logic_error("base prompt pool is empty");
  tasks_.back().frozen = true;
}

const Parameter& BasePromptPool::prompt(std::size_t task, std::size_t layer) const {
  return tasks_.at(task).layers.at(layer);
}

Parameter& BasePromptPool::current(std::size_t layer) {
  if (!current_trainable()) throw std::logic_error("no trainable base prompt");
  return tasks_.back().layers.at(layer);
}

std::vector<Var> BasePromptPool::bind_layer(Tape& tape, std::size_t layer,
                                            bool trainable) const {
  std::vector<Var> out;
  for (std::size_t t = 0; t < tasks_.size(); ++t) {
    const auto& p = tasks_[t].layers.at(layer);
    const bool leaf = trainable && !tasks_[t].frozen;
    out.push_back(leaf ? tape.parameter(p) : tape.constant(p.value));
  }
  return out;
}

// ---- TaskEmbeddings -------------------------------------------------------

void TaskEmbeddings::add_task(Rng& rng) {
  if (current_trainable())
    throw std::logic_error("task embeddings: previous task still trainable");
  embeddings_.push_back({"task_embedding.task" + std::to_string(embeddings_.size()),
                         uniform({dim_}, 0.03, rng)});
  frozen_.push_back(false);
}

void TaskEmbeddings::freeze_current() {
  if (embeddings_.empty()) throw std::logic_error("no task embeddings");
  frozen_.back() = true;
}

Parameter& TaskEmbeddings::current() {
  if (!current_trainable()) throw std::logic_error("no trainable task embedding");
  return embeddings_.back();
}

Var TaskEmbeddings::bind(Tape& tape, std::size_t task, bool trainable) const {
  const auto& e = embeddings_.at(task);
  return trainable && !frozen_.at(task) ? tape.parameter(e) : tape.constant(e.value);
}

// ---- EvolutionWeights -----------------------------------------------------

std::vector<Parameter*> LayerWeights::parameters() {
  return {&wq, &wk, &wv, &wo, &w1, &w2, &ln1_gamma, &ln1_beta, &ln2_gamma, &ln2_beta};
}

std::vector<const Parameter*> LayerWeights::parameters() const {
  return {&wq, &wk, &wv, &wo, &w1, &w2, &ln1_gamma, &ln1_beta, &ln2_gamma, &ln2_beta};
}

EvolutionWeights EvolutionWeights::init(const EvolutionDims& dims, Rng& rng) {
  dims.validate();
  EvolutionWeights w;
  w.dims_ = dims;
  const std::size_t d = dims.dim, dp = dims.proj_dim, dn = dims.align_dim;
  const double bd = 1.0 / std::sqrt(static_cast<double>(d));
  const double bp = 1.0 / std::sqrt(static_cast<double>(dp));
  const double bn = 1.0 / std::sqrt(static_cast<double>(dn));
  for (std::size_t l = 0; l < dims.layers; ++l) {
    const std::string p = "evolution.layer" + std::to_string(l) + ".";
    w.layers_.push_back(LayerWeights{{p + "wq", uniform({d, dp}, bd, rng)},
                                     {p + "wk", uniform({d, dp}, bd, rng)},
                                     {p + "wv", uniform({d, dp}, bd, rng)},
                                     {p + "wo", uniform({dp, d}, bp, rng)},
                                     {p + "w1", uniform({d, dn}, bd, rng)},
                                     {p + "w2", uniform({dn, d}, bn, rng)},
                                     {p + "ln1_gamma", Array({d}, 1.0)},
                                     {p + "ln1_beta", Array({d}, 0.0)},
                                     {p + "ln2_gamma", Array({d}, 1.0)},
                                     {p + "ln2_beta", Array({d}, 0.0)}});
  }
  return w;
}

LayerWeights& EvolutionWeights::layer(std::size_t l) {
  if (l >= layers_.size())
    throw std::out_of_range("evolution layer " + std::to_string(l) + " of " +
                            std::to_string(layers_.size()));
  return layers_[l];
}

const LayerWeights& EvolutionWeights::layer(std::size_t l) const {
  if (l >= layers_.size())
    throw std::out_of_range("evolution layer " + std::to_string(l) + " of " +
                            std::to_string(layers_.size()));
  return layers_[l];
}

std::vector<Parameter*> EvolutionWeights::parameters() {
  std::vector<Parameter*> out;
  for (auto& l : layers_)
    for (auto* p : l.parameters()) out.push_back(p);
  return out;
}

std::size_t EvolutionWeights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_)
    for (const auto* p : l.parameters()) n += p->value.size();
  return n;
}

LayerVars LayerVars::bind(Tape& tape, const EvolutionWeights& w, std::size_t layer,
                          bool trainable) {
  const auto& L = w.layer(layer);
  auto b = [&](const Parameter& p) {
    return trainable ? tape.parameter(p) : tape.constant(p.value);
  };
  return {b(L.wq),        b(L.wk),       b(L.wv),        b(L.wo),       b(L.w1),
          b(L.w2),        b(L.ln1_gamma), b(L.ln1_beta), b(L.ln2_gamma), b(L.ln2_beta)};
}

// ---- operations -----------------------------------------------------------

Stage condition_on_task(std::span<const Var> pool, Var embedding) {
  count();
  require_nonempty(pool, "condition_on_task");
  const Array& ev = embedding.value();
  const std::size_t d = ev.size();
  Tape& tape = embedding.tape();
  Var e_row = diff::reshape(embedding, {1, d});
  Stage out;
  for (const Var& slice : pool) {
    const Array& sv = slice.value();
    if (sv.rank() != 2 || sv.cols() != d)
      throw ShapeError::mismatch("condition_on_task", sv.shape(), ev.shape());
    // sigma(e): e broadcast to every row of the slice.
    Var broadcast = diff::matmul(tape.constant(Array({sv.rows(), 1}, 1.0)), e_row);
    Var logits = diff::scale(diff::matmul(broadcast, diff::transpose(slice)),
                             1.0 / std::sqrt(static_cast<double>(d)));
    Var weights = diff::softmax(logits, 1);
    out.affinities.push_back(weights);
    out.outputs.push_back(diff::matmul(weights, slice));
  }
  return out;
}

Projection project_qkv(Var new_prompt, std::span<const Var> pool, const LayerVars& w) {
  count();
  require_nonempty(pool, "project_qkv");
  Projection p;
  p.query = diff::matmul(new_prompt, w.wq);
  for (const Var& slice : pool) {
    p.keys.push_back(diff::matmul(slice, w.wk));
    p.values.push_back(diff::matmul(slice, w.wv));
  }
  return p;
}

Stage task_level_transform(Var query, std::span<const Var> keys,
                           std::span<const Var> values) {
  count();
  require_nonempty(keys, "task_level_transform");
  if (keys.size() != values.size())
    throw std::invalid_argument("task_level_transform: key/value task counts differ");
  const double sc = 1.0 / std::sqrt(static_cast<double>(query.value().cols()));
  Stage out;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    Var g = diff::softmax(diff::scale(diff::matmul(query, diff::transpose(keys[i])), sc), 1);
    out.affinities.push_back(g);
    out.outputs.push_back(diff::matmul(g, values[i]));
  }
  return out;
}

Stage feature_level_transform(Var query, std::span<const Var> keys,
                              std::span<const Var> transformed) {
  count();
  require_nonempty(keys, "feature_level_transform");
  if (keys.size() != transformed.size())
    throw std::invalid_argument("feature_level_transform: task counts differ");
  const double sc = 1.0 / std::sqrt(static_cast<double>(query.value().cols()));
  Var qt = diff::transpose(query);
  Stage out;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    Var f = diff::softmax(diff::scale(diff::matmul(qt, keys[i]), sc), 1);
    out.affinities.push_back(f);
    out.outputs.push_back(diff::matmul(f, diff::transpose(transformed[i])));
  }
  return out;
}

std::vector<Var> integrate_residual(std::span<const Var> pool, std::span<const Var> hat,
                                    const LayerVars& w) {
  count();
  if (pool.size() != hat.size())
    throw std::invalid_argument("integrate_residual: task counts differ");
  std::vector<Var> out;
  for (std::size_t i = 0; i < pool.size(); ++i)
    out.push_back(diff::layer_norm(
        pool[i] + diff::matmul(diff::transpose(hat[i]), w.wo), w.ln1_gamma, w.ln1_beta));
  return out;
}

std::vector<Var> task_guided_align(std::span<const Var> h, const LayerVars& w) {
  count();
  std::vector<Var> out;
  for (const Var& x : h) {
    Var lt = diff::matmul(diff::relu(diff::matmul(x, w.w1)), w.w2);
    out.push_back(diff::layer_norm(x + lt, w.ln2_gamma, w.ln2_beta));
  }
  return out;
}

Var aggregate_rainbow(std::span<const Var> aligned) {
  count();
  if (aligned.empty()) throw std::invalid_argument("aggregate_rainbow: no tasks");
  return diff::average(aligned);
}

Var evolve_layer(std::span<const Var> pool, Var embedding, const LayerVars& w,
                 EvolutionTrace* trace) {
  count();
  require_nonempty(pool, "evolve_layer");
  Stage conditioned = condition_on_task(pool, embedding);
  Projection proj = project_qkv(pool.back(), conditioned.outputs, w);
  Stage task = task_level_transform(proj.query, proj.keys, proj.values);
  Stage feature = feature_level_transform(proj.query, proj.keys, task.outputs);
  auto integrated = integrate_residual(conditioned.outputs, feature.outputs, w);
  auto aligned = task_guided_align(integrated, w);
  if (trace) {
    for (const auto& v : conditioned.affinities) trace->conditioning.push_back(v.value());
    for (const auto& v : task.affinities) trace->task_affinity.push_back(v.value());
    for (const auto& v : feature.affinities) trace->feature_affinity.push_back(v.value());
  }
  return aggregate_rainbow(aligned);
}

Var evolve_layer(Tape& tape, const BasePromptPool& pool, const TaskEmbeddings& embeddings,
                 const EvolutionWeights& weights, std::size_t layer, bool trainable,
                 EvolutionTrace* trace) {
  if (layer >= weights.layers())
    throw std::out_of_range("evolve_layer: layer " + std::to_string(layer) + " of " +
                            std::to_string(weights.layers()));
  if (pool.task_count() == 0 || embeddings.size() != pool.task_count())
    throw std::invalid_argument("evolve_layer: pool and embeddings disagree on tasks");
  auto slices = pool.bind_layer(tape, layer, trainable);
  Var e = embeddings.bind(tape, embeddings.size() - 1, trainable);
  return evolve_layer(slices, e, LayerVars::bind(tape, weights, layer, trainable), trace);
}

// ---- RainbowPromptSet -----------------------------------------------------

std::optional<backbone::PrefixPair> RainbowPromptSet::Entry::prefix(std::size_t layer) const {
  const auto& p = prompts.at(layer);
  if (!p) return std::nullopt;
  return backbone::PrefixPair::split(*p);
}

bool RainbowPromptSet::Entry::bitwise_equal(const Entry& other) const {
  if (mask != other.mask || prompts.size() != other.prompts.size()) return false;
  for (std::size_t l = 0; l < prompts.size(); ++l) {
    if (prompts[l].has_value() != other.prompts[l].has_value()) return false;
    if (prompts[l] && !prompts[l]->bitwise_equal(*other.prompts[l])) return false;
  }
  return true;
}

void RainbowPromptSet::store(std::size_t task, Entry entry) {
  if (task < entries_.size())
    throw std::logic_error("task " + std::to_string(task) + " is already finalized");
  if (task != entries_.size())
    throw std::logic_error("task " + std::to_string(task) + " finalized out of order");
  if (entry.prompts.size() != entry.mask.layers())
    throw std::invalid_argument("rainbow prompt entry: mask and prompt layers differ");
  for (std::size_t l = 0; l < entry.prompts.size(); ++l)
    if (entry.prompts[l].has_value() != static_cast<bool>(entry.mask.insert[l]))
      throw std::invalid_argument("rainbow prompt entry disagrees with its mask at layer " +
                                  std::to_string(l));
  entries_.push_back(std::move(entry));
}

std::size_t RainbowPromptSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    for (const auto& p : e.prompts)
      if (p) n += p->size();
  return n;
}

void RainbowPromptSet::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.csv");
  manifest << "task,file,mask\n";
  for (std::size_t t = 0; t < entries_.size(); ++t) {
    const std::string file = "task_" + std::to_string(t + 1) + ".bin";
    std::vector<io::NamedArray> arrays;
    for (std::size_t l = 0; l < entries_[t].prompts.size(); ++l)
      if (entries_[t].prompts[l])
        arrays.push_back({"layer" + std::to_string(l), *entries_[t].prompts[l]});
    io::write_snapshot(dir / file, arrays);
    manifest << t + 1 << ',' << file << ',' << entries_[t].mask.to_string() << '\n';
  }
}

RainbowPromptSet RainbowPromptSet::load(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.csv");
  if (!manifest) throw io::SnapshotError("missing " + (dir / "manifest.csv").string());
  std::string line;
  std::getline(manifest, line);
  RainbowPromptSet set;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string task, file, mask;
    std::getline(row, task, ',');
    std::getline(row, file, ',');
    std::getline(row, mask, ',');
    Entry e;
    e.mask = gate::LayerMask::parse(mask);
    e.prompts.resize(e.mask.layers());
    for (auto& a : io::read_snapshot(dir / file)) {
      const std::size_t l = std::stoul(a.name.substr(5));
      e.prompts.at(l) = std::move(a.value);
    }
    set.store(std::stoul(task) - 1, std::move(e));
  }
  return set;
}

void finalize_task(RainbowPromptSet& set, const BasePromptPool& pool,
                   const TaskEmbeddings& embeddings, const EvolutionWeights& weights,
                   const gate::LayerMask& mask, diff::Precision precision) {
  if (pool.task_count() == 0) throw std::logic_error("finalize_task: no task to finalize");
  const std::size_t task = pool.task_count() - 1;
  if (set.contains(task))
    throw std::logic_error("task " + std::to_string(task) + " is already finalized");
  if (mask.layers() != weights.layers())
    throw std::invalid_argument("finalize_task: mask covers " +
                                std::to_string(mask.layers()) + " layers, model has " +
                                std::to_string(weights.layers()));
  RainbowPromptSet::Entry entry;
  entry.mask = mask;
  entry.prompts.resize(mask.layers());
  for (std::size_t l = 0; l < mask.layers(); ++l) {
    if (!mask.insert[l]) continue;
    Tape tape(precision);
    entry.prompts[l] = evolve_layer(tape, pool, embeddings, weights, l, false).value();
  }
  set.store(task, std::move(entry));
}

}  // namespace rbwp::evolution
