// SPDX-License-Identifier: Apache-2.0
#include "rbwp/diff/tape.hpp"

#include <cassert>

namespace rbwp::diff {

const Array& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

const Array& Gradients::of(const Parameter& p) const {
  auto it = grads_.find(&p);
  if (it == grads_.end())
    throw std::out_of_range("no gradient recorded for parameter '" + p.name +
                            "'");
  return it->second;
}

void Tape::quantize(std::span<double> values) const {
  if (precision_ == Precision::f64) return;
  for (auto& v : values) v = static_cast<double>(static_cast<float>(v));
}

Var Tape::constant(Array value) {
  quantize(value.values());
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(const Parameter& p) {
  Array value = p.value;
  quantize(value.values());
  nodes_.push_back(Node{std::move(value), {}, {}, &p, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Array value, std::span<const Var> inputs, BackwardFn fn) {
  quantize(value.values());
#ifndef NDEBUG
  if (!value.all_finite())
    throw NumericalError("non-finite value produced by a forward operation");
#endif
  bool needs = false;
  for (const auto& in : inputs) {
    assert(&in.tape() == this);
    needs = needs || nodes_[in.id()].requires_grad;
  }
  nodes_.push_back(
      Node{std::move(value), {}, needs ? std::move(fn) : BackwardFn{}, nullptr,
           needs});
  return Var(this, nodes_.size() - 1);
}

std::span<double> Tape::grad(std::size_t id) {
  auto& node = nodes_[id];
  if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
  return node.grad;
}

Gradients Tape::backward(Var loss) {
  if (&loss.tape() != this)
    throw std::invalid_argument("backward: loss belongs to another tape");
  if (loss.value().size() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " +
                     to_string(loss.shape()));
  for (auto& n : nodes_) n.grad.clear();
  if (nodes_[loss.id()].requires_grad) grad(loss.id())[0] = 1.0;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    auto& node = nodes_[id];
    if (!node.backward || node.grad.empty()) continue;
    quantize(node.grad);
    node.backward(*this, node.grad);
  }
  Gradients out;
  for (auto& node : nodes_) {
    if (!node.param) continue;
    Array g(node.value.shape(), 0.0);
    if (!node.grad.empty()) {
      quantize(node.grad);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = node.grad[i];
    }
    auto [it, inserted] = out.grads_.try_emplace(node.param, g);
    if (!inserted)
      for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
  }
  return out;
}

}  // namespace rbwp::diff
