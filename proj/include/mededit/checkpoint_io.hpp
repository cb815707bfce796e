// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mededit/model.hpp"

namespace mededit {

// Checkpoint container, byte-exact:
//   offset 0   8-byte magic "MEDEDIT1"
//   offset 8   u16 version (little-endian, currently 1)
//   offset 10  u32 header length N (little-endian)
//   offset 14  N bytes of UTF-8 JSON: {"config": {...}, "tensors": [
//              {"name", "shape", "offset"}, ...]} with offsets relative to
//              the payload section start
//   then       raw little-endian float32 tensor payloads in directory order
//   then       vocabulary: u32 count, then per token u32 length + UTF-8 bytes
// The layout is normative; the integrity module hashes these exact bytes.

inline constexpr char kCheckpointMagic[8] = {'M', 'E', 'D', 'E', 'D', 'I', 'T', '1'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const LMCheckpoint& ckpt);
LMCheckpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const LMCheckpoint& ckpt, const std::string& path);
LMCheckpoint load_checkpoint(const std::string& path);

/// Byte ranges of each tensor payload, for per-tensor hashing.
struct CheckpointLayout {
  struct Entry {
    std::string name;
    std::vector<int> shape;
    std::size_t byte_offset;  // absolute offset into the file
    std::size_t byte_size;
  };
  ModelConfig config;
  std::vector<Entry> tensors;
  std::size_t payload_start = 0;
  std::size_t vocab_start = 0;
};

CheckpointLayout inspect_checkpoint(const std::vector<std::uint8_t>& bytes);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);

}  // namespace mededit
