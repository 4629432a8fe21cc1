// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>

namespace fans {

/// CRC-64/XZ (ECMA-182 polynomial, reflected, init and final xor all ones).
/// Check value: crc64("123456789") == 0x995DC9BBDF1939FA.
class Crc64 {
 public:
  void update(std::span<const std::uint8_t> bytes);
  std::uint64_t value() const { return ~state_; }

 private:
  std::uint64_t state_ = ~std::uint64_t{0};
};

std::uint64_t crc64(std::span<const std::uint8_t> bytes);

}  // namespace fans
