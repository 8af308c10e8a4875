// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <deque>
#include <set>

#include "rbwp/diff/ops.hpp"
#include "rbwp/io/rng.hpp"

namespace rbwp::backbone {

/// Linear head that grows by one block of rows per task. Blocks of
/// completed tasks are frozen: they only ever enter a tape as constants.
class Classifier {
 public:
  explicit Classifier(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const noexcept { return dim_; }
  std::size_t class_count() const noexcept { return classes_; }
  std::size_t block_count() const noexcept { return blocks_.size(); }
  std::size_t block_offset(std::size_t block) const { return blocks_.at(block).offset; }
  std::size_t block_size(std::size_t block) const {
    return blocks_.at(block).weights.value.rows();
  }

  /// Appends `classes` rows initialized uniform in +-1/sqrt(dim).
  void add_block(std::size_t classes, Rng& rng);
  void freeze_block(std::size_t block);
  bool frozen(std::size_t block) const { return blocks_.at(block).frozen; }
  std::set<std::size_t> frozen_rows() const;

  diff::Parameter& weights(std::size_t block);
  diff::Parameter& bias(std::size_t block);
  const diff::Parameter& weights(std::size_t block) const { return blocks_.at(block).weights; }
  const diff::Parameter& bias(std::size_t block) const { return blocks_.at(block).bias; }

  /// Logits of one block's classes with that block as trainable leaves.
  /// Rejects frozen blocks.
  diff::Var block_logits(diff::Tape& tape, diff::Var features, std::size_t block) const;
  /// Logits over every class so far with `block` as trainable leaves and
  /// every other block constant. Rejects a frozen `block`.
  diff::Var training_logits(diff::Tape& tape, diff::Var features, std::size_t block) const;
  /// Logits over every class so far, all rows constant.
  diff::Var logits(diff::Tape& tape, diff::Var features) const;

 private:
  struct Block {
    diff::Parameter weights;  // classes x dim
    diff::Parameter bias;     // classes
    std::size_t offset;
    bool frozen = false;
  };
  std::size_t dim_;
  std::size_t classes_ = 0;
  std::deque<Block> blocks_;
};

}  // namespace rbwp::backbone
