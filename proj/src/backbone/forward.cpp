// SPDX-License-Identifier: Apache-2.0
#include "rbwp/backbone/forward.hpp"

#include <stdexcept>

namespace rbwp::backbone {

diff::Var forward(diff::Tape& tape, const Encoder& encoder, const Classifier& classifier,
                  std::span<const Array> inputs, const LayerPrefixes& prefixes) {
  if (classifier.class_count() == 0)
    throw std::invalid_argument("forward: classifier has no classes");
  return classifier.logits(tape, encoder.encode(tape, inputs, prefixes));
}

diff::PrefixRows constant_prefix(diff::Tape& tape, const PrefixPair& pair) {
  return {tape.constant(pair.keys), tape.constant(pair.values), pair.length()};
}

}  // namespace rbwp::backbone
