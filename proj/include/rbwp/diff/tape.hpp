// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "rbwp/diff/array.hpp"

namespace rbwp::diff {

/// Storage precision of a tape. In f32 mode every forward value and every
/// propagated gradient is rounded to the nearest float.
enum class Precision { f32, f64 };

/// A named trainable tensor. Identity (address) keys its gradient.
struct Parameter {
  std::string name;
  Array value;
};

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Array& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradients produced by Tape::backward, keyed by parameter identity.
class Gradients {
 public:
  const Array& of(const Parameter& p) const;
  bool contains(const Parameter& p) const { return grads_.count(&p) != 0; }
  std::size_t size() const noexcept { return grads_.size(); }

  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }

 private:
  friend class Tape;
  std::unordered_map<const Parameter*, Array> grads_;
};

/// Records operations in execution order; backward replays them in reverse.
/// Single writer. Node values are immutable once recorded.
class Tape {
 public:
  /// Called during backward with the node's complete output gradient.
  using BackwardFn = std::function<void(Tape&, std::span<const double>)>;

  explicit Tape(Precision precision = Precision::f64) : precision_(precision) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Precision precision() const noexcept { return precision_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Array value);
  Var parameter(const Parameter& p);

  /// Records an op output. `fn` may be empty when no input needs a gradient.
  Var record(Array value, std::span<const Var> inputs, BackwardFn fn);

  const Array& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient accumulator of an input node, zero-initialized on first use.
  std::span<double> grad(std::size_t id);

  /// Populates gradients for every parameter leaf on this tape. Leaves that
  /// the loss does not reach receive zeros. Rejects non-scalar losses.
  Gradients backward(Var loss);

  /// Rounds in place according to the tape precision.
  void quantize(std::span<double> values) const;

 private:
  struct Node {
    Array value;
    std::vector<double> grad;
    BackwardFn backward;
    const Parameter* param = nullptr;
    bool requires_grad = false;
  };
  Precision precision_;
  std::deque<Node> nodes_;
};

}  // namespace rbwp::diff
