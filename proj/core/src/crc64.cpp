// SPDX-License-Identifier: Apache-2.0
#include "fans/crc64.hpp"

#include <array>

namespace fans {

namespace {

constexpr std::uint64_t kPoly = 0xC96C5795D7870F42ULL;

constexpr std::array<std::uint64_t, 256> make_table() {
  std::array<std::uint64_t, 256> table{};
  for (std::uint64_t i = 0; i < 256; ++i) {
    std::uint64_t c = i;
    for (int k = 0; k < 8; ++k) c = (c & 1) ? (c >> 1) ^ kPoly : c >> 1;
    table[i] = c;
  }
  return table;
}

constexpr auto kTable = make_table();

}  // namespace

void Crc64::update(std::span<const std::uint8_t> bytes) {
  for (auto b : bytes) state_ = kTable[(state_ ^ b) & 0xFF] ^ (state_ >> 8);
}

std::uint64_t crc64(std::span<const std::uint8_t> bytes) {
  Crc64 c;
  c.update(bytes);
  return c.value();
}

}  // namespace fans
