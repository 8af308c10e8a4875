// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace rbwp::gate {

/// Per-layer insert decisions of one task.
struct LayerMask {
  std::vector<bool> insert;

  static LayerMask all(std::size_t layers, bool value) {
    return {std::vector<bool>(layers, value)};
  }
  std::size_t layers() const noexcept { return insert.size(); }
  std::size_t selected() const {
    return static_cast<std::size_t>(std::count(insert.begin(), insert.end(), true));
  }
  /// Deepest selected layer, if any.
  std::optional<std::size_t> last_selected() const {
    for (std::size_t l = insert.size(); l-- > 0;)
      if (insert[l]) return l;
    return std::nullopt;
  }
  /// "1" / "0" per layer, shallowest first.
  std::string to_string() const {
    std::string s;
    for (bool b : insert) s += b ? '1' : '0';
    return s;
  }
  static LayerMask parse(const std::string& s) {
    LayerMask m;
    for (char c : s) {
      if (c != '0' && c != '1') throw std::invalid_argument("bad layer mask '" + s + "'");
      m.insert.push_back(c == '1');
    }
    return m;
  }
  bool operator==(const LayerMask&) const = default;
};

}  // namespace rbwp::gate
