// SPDX-License-Identifier: Apache-2.0
#include "rbwp/backbone/classifier.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace rbwp::backbone {

using diff::Tape;
using diff::Var;

void Classifier::add_block(std::size_t classes, Rng& rng) {
  if (classes == 0) throw std::invalid_argument("classifier block needs classes");
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim_));
  Array w({classes, dim_});
  for (auto& v : w.values()) v = rng.uniform(-bound, bound);
  const std::string tag = "classifier.block" + std::to_string(blocks_.size());
  blocks_.push_back(Block{{tag + ".weights", std::move(w)},
                          {tag + ".bias", Array({classes}, 0.0)},
                          classes_,
                          false});
  classes_ += classes;
}

void Classifier::freeze_block(std::size_t block) { blocks_.at(block).frozen = true; }

std::set<std::size_t> Classifier::frozen_rows() const {
  std::set<std::size_t> rows;
  for (const auto& b : blocks_)
    if (b.frozen)
      for (std::size_t r = 0; r < b.weights.value.rows(); ++r) rows.insert(b.offset + r);
  return rows;
}

diff::Parameter& Classifier::weights(std::size_t block) {
  auto& b = blocks_.at(block);
  if (b.frozen) throw std::logic_error("classifier block " + std::to_string(block) + " is frozen");
  return b.weights;
}

diff::Parameter& Classifier::bias(std::size_t block) {
  auto& b = blocks_.at(block);
  if (b.frozen) throw std::logic_error("classifier block " + std::to_string(block) + " is frozen");
  return b.bias;
}

Var Classifier::block_logits(Tape& tape, Var features, std::size_t block) const {
  const auto& b = blocks_.at(block);
  if (b.frozen)
    throw std::logic_error("classifier block " + std::to_string(block) + " is frozen");
  Var w = tape.parameter(b.weights);
  return diff::add_row(diff::matmul(features, diff::transpose(w)), tape.parameter(b.bias));
}

Var Classifier::training_logits(Tape& tape, Var features, std::size_t block) const {
  if (blocks_.at(block).frozen)
    throw std::logic_error("classifier block " + std::to_string(block) + " is frozen");
  std::vector<Var> w, b;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& blk = blocks_[i];
    w.push_back(i == block ? tape.parameter(blk.weights) : tape.constant(blk.weights.value));
    b.push_back(i == block ? tape.parameter(blk.bias) : tape.constant(blk.bias.value));
  }
  return diff::add_row(diff::matmul(features, diff::transpose(diff::concat(w))), diff::concat(b));
}

Var Classifier::logits(Tape& tape, Var features) const {
  if (classes_ == 0) throw std::invalid_argument("classifier has no classes");
  Array w({classes_, dim_});
  Array bias({classes_});
  for (const auto& b : blocks_) {
    const auto& src = b.weights.value.storage();
    std::copy(src.begin(), src.end(),
              w.values().begin() + static_cast<std::ptrdiff_t>(b.offset * dim_));
    for (std::size_t r = 0; r < b.bias.value.size(); ++r) bias[b.offset + r] = b.bias.value[r];
  }
  return diff::add_row(diff::matmul(features, tape.constant(transpose(w))),
                       tape.constant(std::move(bias)));
}

}  // namespace rbwp::backbone
