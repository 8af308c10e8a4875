// SPDX-License-Identifier: Apache-2.0
#include "rbwp/io/snapshot.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace rbwp::io {

namespace {

constexpr std::array<char, 4> kMagic{'R', 'B', 'W', 'P'};

template <class U>
void put(std::ostream& os, U v) {
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i)
    buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <class U>
U get(std::istream& is) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U)))
    throw SnapshotError("snapshot truncated");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void write_snapshot(const std::filesystem::path& path,
                    std::span<const NamedArray> arrays) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw SnapshotError("cannot open " + path.string() + " for writing");
  os.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(os, kSnapshotVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(a.name.size()));
    os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(a.value.rank()));
    for (auto d : a.value.shape()) put<std::uint64_t>(os, d);
  }
  for (const auto& a : arrays)
    for (double v : a.value.values()) put<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  if (!os) throw SnapshotError("write failed for " + path.string());
}

std::vector<NamedArray> read_snapshot(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw SnapshotError("cannot open " + path.string());
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic)
    throw SnapshotError(path.string() + ": bad magic");
  const auto version = get<std::uint32_t>(is);
  if (version != kSnapshotVersion)
    throw SnapshotError(path.string() + ": unsupported version " +
                        std::to_string(version));
  const auto count = get<std::uint32_t>(is);
  std::vector<std::string> names;
  std::vector<Shape> shapes;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = get<std::uint32_t>(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw SnapshotError("snapshot truncated");
    const auto rank = get<std::uint32_t>(is);
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r)
      shape.push_back(static_cast<std::size_t>(get<std::uint64_t>(is)));
    names.push_back(std::move(name));
    shapes.push_back(std::move(shape));
  }
  std::vector<NamedArray> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    std::vector<double> vals(element_count(shapes[k]));
    for (auto& v : vals) v = std::bit_cast<double>(get<std::uint64_t>(is));
    out.push_back({std::move(names[k]), Array(std::move(shapes[k]), std::move(vals))});
  }
  return out;
}

}  // namespace rbwp::io
