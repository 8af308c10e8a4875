// SPDX-License-Identifier: Apache-2.0
#include "rbwp/diff/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace rbwp::diff {

namespace {

double evaluate(const LossFn& loss) {
  Tape tape(Precision::f64);
  return loss(tape).value().item();
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

}  // namespace

GradCheckReport grad_check(const LossFn& loss, std::span<Parameter* const> params,
                           const GradCheckOptions& options) {
  if (!(options.step > 0.0))
    throw std::invalid_argument("grad_check: step must be positive");
  const double h = options.step;

  Tape tape(Precision::f64);
  Var out = loss(tape);
  const double base = out.value().item();
  Gradients grads = tape.backward(out);

  const double again = evaluate(loss);
  if (!same_bits(base, again))
    throw std::logic_error("grad_check: loss function is not deterministic (" +
                           std::to_string(base) + " vs " + std::to_string(again) +
                           ")");

  GradCheckReport report;
  for (Parameter* p : params) {
    Array analytic = grads.contains(*p) ? grads.of(*p) : Array(p->value.shape(), 0.0);
    if (options.tamper_analytic) options.tamper_analytic(*p, analytic);
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double orig = p->value[i];
      p->value[i] = orig + h;
      const double up = evaluate(loss);
      p->value[i] = orig - h;
      const double down = evaluate(loss);
      p->value[i] = orig;

      const double central = (up - down) / (2.0 * h);
      const double a = analytic[i];
      const double err = std::abs(a - central) / std::max(1.0, std::abs(central));
      if (err > 1e-6) {
        const double fwd = (up - base) / h, bwd = (base - down) / h;
        const double spread = std::abs(fwd - bwd);
        if (std::min(std::abs(a - fwd), std::abs(a - bwd)) < 0.1 * spread) {
          report.skipped.push_back(p->name + "[" + std::to_string(i) + "]");
          continue;
        }
      }
      ++report.checked;
      if (err > report.max_relative_error || report.worst_parameter.empty()) {
        if (err >= report.max_relative_error) {
          report.max_relative_error = err;
          report.worst_parameter = p->name;
          report.worst_index = i;
        }
      }
    }
  }
  return report;
}

}  // namespace rbwp::diff
