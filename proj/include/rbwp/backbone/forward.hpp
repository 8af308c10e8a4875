// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>

#include "rbwp/backbone/classifier.hpp"
#include "rbwp/backbone/encoder.hpp"

namespace rbwp::backbone {

/// Logits (batch x class_count) of the prompted encoder. Rejects an empty
/// classifier.
diff::Var forward(diff::Tape& tape, const Encoder& encoder, const Classifier& classifier,
                  std::span<const Array> inputs, const LayerPrefixes& prefixes);

/// Shares a fixed prompt across a batch as a prefix on the given tape.
diff::PrefixRows constant_prefix(diff::Tape& tape, const PrefixPair& pair);

}  // namespace rbwp::backbone
