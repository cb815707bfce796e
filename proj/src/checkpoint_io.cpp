// SPDX-License-Identifier: Apache-2.0
#include "mededit/checkpoint_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace mededit {

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace {

using nlohmann::json;

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  const std::uint8_t* take(std::size_t n, const char* what) {
    if (remaining() < n) {
      throw FormatError(std::string("truncated checkpoint: unexpected end of file while reading ") + what);
    }
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::uint16_t u16(const char* what) {
    const std::uint8_t* p = take(2, what);
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }

  std::uint32_t u32(const char* what) {
    const std::uint8_t* p = take(4, what);
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

json config_to_json(const ModelConfig& cfg) {
  return json{{"d_mlp", cfg.d_mlp},           {"d_model", cfg.d_model},
              {"max_context", cfg.max_context}, {"n_heads", cfg.n_heads},
              {"n_layers", cfg.n_layers},       {"rng_seed", cfg.rng_seed},
              {"vocab_size", cfg.vocab_size}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig cfg;
  try {
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.d_mlp = j.at("d_mlp").get<int>();
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.max_context = j.at("max_context").get<int>();
    cfg.rng_seed = j.at("rng_seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad checkpoint config: ") + e.what());
  }
  return cfg;
}

struct ParsedHeader {
  ModelConfig config;
  std::vector<CheckpointLayout::Entry> tensors;  // byte_offset relative to payload start
  std::size_t payload_bytes = 0;
  std::size_t payload_start = 0;
};

ParsedHeader parse_header(Reader& r) {
  const std::uint8_t* magic = r.take(sizeof(kCheckpointMagic), "magic");
  if (std::memcmp(magic, kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw FormatError("bad checkpoint magic");
  }
  const std::uint16_t version = r.u16("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t header_len = r.u32("header length");
  const std::uint8_t* hp = r.take(header_len, "header");
  json header;
  try {
    header = json::parse(hp, hp + header_len);
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad checkpoint header JSON: ") + e.what());
  }
  ParsedHeader out;
  out.config = config_from_json(header.at("config"));
  out.config.validate();
  if (!header.contains("tensors") || !header["tensors"].is_array()) {
    throw FormatError("checkpoint header lacks a tensor directory");
  }
  std::size_t expect_offset = 0;
  for (const auto& e : header["tensors"]) {
    CheckpointLayout::Entry entry;
    try {
      entry.name = e.at("name").get<std::string>();
      entry.shape = e.at("shape").get<std::vector<int>>();
      entry.byte_offset = e.at("offset").get<std::size_t>();
    } catch (const json::exception& ex) {
      throw FormatError(std::string("bad tensor directory entry: ") + ex.what());
    }
    std::int64_t numel = 1;
    for (int d : entry.shape) {
      if (d <= 0) throw FormatError("tensor " + entry.name + " has a non-positive dimension");
      numel *= d;
    }
    entry.byte_size = static_cast<std::size_t>(numel) * sizeof(float);
    if (entry.byte_offset != expect_offset) {
      throw FormatError("tensor " + entry.name + " payload is not contiguous with the directory order");
    }
    expect_offset += entry.byte_size;
    out.tensors.push_back(std::move(entry));
  }
  // Directory must match the canonical schema for this config.
  const auto schema = LMCheckpoint::canonical_tensor_schema(out.config);
  if (schema.size() != out.tensors.size()) {
    throw FormatError("tensor directory size does not match the canonical schema");
  }
  for (std::size_t i = 0; i < schema.size(); ++i) {
    if (out.tensors[i].name != schema[i].first || out.tensors[i].shape != schema[i].second) {
      throw FormatError("tensor directory entry " + out.tensors[i].name +
                        " does not match the canonical schema");
    }
  }
  out.payload_bytes = expect_offset;
  out.payload_start = r.pos();
  return out;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const LMCheckpoint& ckpt) {
  ckpt.validate();
  json dir = json::array();
  std::size_t offset = 0;
  for (const auto& name : ckpt.names) {
    const Tensor& t = ckpt.tensor(name);
    dir.push_back(json{{"name", name}, {"offset", offset}, {"shape", t.shape()}});
    offset += static_cast<std::size_t>(t.numel()) * sizeof(float);
  }
  const std::string header = json{{"config", config_to_json(ckpt.config)}, {"tensors", dir}}.dump();

  std::vector<std::uint8_t> out;
  out.reserve(14 + header.size() + offset);
  out.insert(out.end(), kCheckpointMagic, kCheckpointMagic + sizeof(kCheckpointMagic));
  put_u16(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  for (const auto& name : ckpt.names) {
    const Tensor& t = ckpt.tensor(name);
    const auto* bytes = reinterpret_cast<const std::uint8_t*>(t.data());
    out.insert(out.end(), bytes, bytes + static_cast<std::size_t>(t.numel()) * sizeof(float));
  }
  put_u32(out, static_cast<std::uint32_t>(ckpt.vocab.size()));
  for (const auto& tok : ckpt.vocab) {
    put_u32(out, static_cast<std::uint32_t>(tok.size()));
    out.insert(out.end(), tok.begin(), tok.end());
  }
  return out;
}

LMCheckpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  const ParsedHeader header = parse_header(r);
  LMCheckpoint ckpt;
  ckpt.config = header.config;
  for (const auto& entry : header.tensors) {
    const std::uint8_t* p = r.take(entry.byte_size, entry.name.c_str());
    std::vector<float> data(entry.byte_size / sizeof(float));
    std::memcpy(data.data(), p, entry.byte_size);
    Tensor t(entry.shape, std::move(data));
    if (!t.all_finite()) {
      throw FormatError("tensor " + entry.name + " contains non-finite values");
    }
    ckpt.names.push_back(entry.name);
    ckpt.tensors.emplace(entry.name, std::move(t));
  }
  const std::uint32_t vocab_count = r.u32("vocabulary count");
  ckpt.vocab.reserve(vocab_count);
  for (std::uint32_t i = 0; i < vocab_count; ++i) {
    const std::uint32_t len = r.u32("vocabulary token length");
    const std::uint8_t* p = r.take(len, "vocabulary token");
    ckpt.vocab.emplace_back(reinterpret_cast<const char*>(p), len);
  }
  if (r.remaining() != 0) {
    throw FormatError("trailing data after vocabulary section");
  }
  ckpt.validate();
  return ckpt;
}

CheckpointLayout inspect_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  ParsedHeader header = parse_header(r);
  CheckpointLayout layout;
  layout.config = header.config;
  layout.payload_start = header.payload_start;
  layout.vocab_start = header.payload_start + header.payload_bytes;
  if (bytes.size() < layout.vocab_start) {
    throw FormatError("truncated checkpoint: payload section is incomplete");
  }
  for (auto& e : header.tensors) {
    e.byte_offset += header.payload_start;  // relative -> absolute
    layout.tensors.push_back(std::move(e));
  }
  return layout;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  f.seekg(0, std::ios::end);
  const std::streamoff size = f.tellg();
  f.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size));
  if (size > 0) f.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!f) throw IoError("failed reading " + path);
  return bytes;
}

void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing " + path);
}

void save_checkpoint(const LMCheckpoint& ckpt, const std::string& path) {
  write_file_bytes(path, serialize_checkpoint(ckpt));
}

LMCheckpoint load_checkpoint(const std::string& path) {
  return deserialize_checkpoint(read_file_bytes(path));
}

}  // namespace mededit
