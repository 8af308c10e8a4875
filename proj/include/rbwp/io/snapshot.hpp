// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rbwp/diff/array.hpp"

namespace rbwp::io {

// Layout, all integers little-endian:
//   "RBWP"  magic (4 bytes)
//   u32     version (kSnapshotVersion)
//   u32     array count
//   per array: u32 name length, name bytes, u32 rank, u64 x rank dims
//   payload: every array's values as f64, in table order
inline constexpr std::uint32_t kSnapshotVersion = 1;

struct NamedArray {
  std::string name;
  Array value;
};

class SnapshotError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_snapshot(const std::filesystem::path& path,
                    std::span<const NamedArray> arrays);
std::vector<NamedArray> read_snapshot(const std::filesystem::path& path);

}  // namespace rbwp::io
