// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace mededit {

/// Incremental SHA-256 (FIPS 180-4).
class Sha256 {
 public:
  Sha256() { reset(); }

  void reset();
  void update(const void* data, std::size_t len);
  std::array<std::uint8_t, 32> finish();

  /// One-shot convenience: lowercase hex digest of a byte buffer.
  static std::string hex(const void* data, std::size_t len);
  static std::string hex(const std::vector<std::uint8_t>& bytes) {
    return hex(bytes.data(), bytes.size());
  }
  static std::string hex(const std::string& s) { return hex(s.data(), s.size()); }

 private:
  void process_block(const std::uint8_t* block);

  std::array<std::uint32_t, 8> state_{};
  std::uint64_t bit_count_ = 0;
  std::array<std::uint8_t, 64> buffer_{};
  std::size_t buffer_len_ = 0;
};

std::string to_hex(const std::array<std::uint8_t, 32>& digest);

}  // namespace mededit
