// SPDX-License-Identifier: Apache-2.0
#include "mededit/integrity.hpp"

#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mededit/checkpoint_io.hpp"
#include "mededit/sha256.hpp"

namespace mededit {

namespace {

using nlohmann::json;

json probes_to_json(const ProbeResults& p) {
  json j;
  j["perplexity"] = p.perplexity.has_value() ? json(*p.perplexity) : json(nullptr);
  j["fact_probes_passed"] =
      p.fact_probes_passed.has_value() ? json(*p.fact_probes_passed) : json(nullptr);
  j["fact_probes_total"] =
      p.fact_probes_total.has_value() ? json(*p.fact_probes_total) : json(nullptr);
  return j;
}

ProbeResults probes_from_json(const json& j) {
  ProbeResults p;
  if (j.contains("perplexity") && !j["perplexity"].is_null()) {
    p.perplexity = j["perplexity"].get<double>();
  }
  if (j.contains("fact_probes_passed") && !j["fact_probes_passed"].is_null()) {
    p.fact_probes_passed = j["fact_probes_passed"].get<int>();
  }
  if (j.contains("fact_probes_total") && !j["fact_probes_total"].is_null()) {
    p.fact_probes_total = j["fact_probes_total"].get<int>();
  }
  return p;
}

json record_to_json(const RegistryRecord& r, bool with_hash) {
  json j{{"annotation", r.annotation},
         {"checkpoint_digest", r.checkpoint_digest},
         {"index", r.index},
         {"parent_hash", r.parent_hash},
         {"probes", probes_to_json(r.probes)},
         {"timestamp", r.timestamp}};
  if (with_hash) j["record_hash"] = r.record_hash;
  return j;
}

RegistryRecord record_from_json(const json& j) {
  RegistryRecord r;
  try {
    r.index = j.at("index").get<int>();
    r.timestamp = j.at("timestamp").get<std::string>();
    r.checkpoint_digest = j.at("checkpoint_digest").get<std::string>();
    r.parent_hash = j.at("parent_hash").get<std::string>();
    r.probes = probes_from_json(j.at("probes"));
    r.annotation = j.at("annotation").get<std::string>();
    r.record_hash = j.at("record_hash").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed registry record: ") + e.what());
  }
  return r;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02dZ", tm.tm_year + 1900, tm.tm_mon + 1,
                tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec);
  return buf;
}

}  // namespace

ModelDigest digest_checkpoint_bytes(const std::vector<std::uint8_t>& bytes) {
  const CheckpointLayout layout = inspect_checkpoint(bytes);
  if (bytes.size() < layout.vocab_start) {
    throw FormatError("truncated checkpoint: payload shorter than the directory claims");
  }
  ModelDigest digest;
  digest.file_hex = Sha256::hex(bytes);
  for (const auto& entry : layout.tensors) {
    if (entry.byte_offset + entry.byte_size > bytes.size()) {
      throw FormatError("truncated checkpoint: tensor " + entry.name + " extends past end of file");
    }
    digest.tensors[entry.name] = Sha256::hex(bytes.data() + entry.byte_offset, entry.byte_size);
  }
  return digest;
}

ModelDigest digest_checkpoint(const std::string& path) {
  return digest_checkpoint_bytes(read_file_bytes(path));
}

std::string digest_to_json(const ModelDigest& digest) {
  return json{{"file", digest.file_hex}, {"tensors", digest.tensors}}.dump(2) + "\n";
}

ModelDigest digest_from_json(const std::string& text) {
  ModelDigest d;
  try {
    const json j = json::parse(text);
    d.file_hex = j.at("file").get<std::string>();
    d.tensors = j.at("tensors").get<std::map<std::string, std::string>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed digest manifest: ") + e.what());
  }
  return d;
}

TamperVerdict verify_checkpoint_bytes(const std::vector<std::uint8_t>& bytes,
                                      const ModelDigest& expected) {
  const ModelDigest actual = digest_checkpoint_bytes(bytes);
  TamperVerdict verdict;
  verdict.clean = actual.file_hex == expected.file_hex;
  if (verdict.clean) return verdict;
  for (const auto& [name, hex] : expected.tensors) {
    const auto it = actual.tensors.find(name);
    if (it == actual.tensors.end() || it->second != hex) {
      verdict.tampered.push_back(name);
    }
  }
  for (const auto& [name, hex] : actual.tensors) {
    if (!expected.tensors.count(name)) verdict.tampered.push_back(name);
  }
  return verdict;
}

TamperVerdict verify_checkpoint(const std::string& path, const ModelDigest& expected) {
  return verify_checkpoint_bytes(read_file_bytes(path), expected);
}

std::string canonical_record_json(const RegistryRecord& record) {
  return record_to_json(record, /*with_hash=*/false).dump();
}

std::vector<RegistryRecord> read_registry(const std::string& path) {
  std::vector<RegistryRecord> records;
  std::ifstream f(path, std::ios::binary);
  if (!f) return records;  // a missing registry is an empty chain
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError("registry line " + std::to_string(line_no) + " is not valid JSON: " + e.what());
    }
    records.push_back(record_from_json(j));
  }
  return records;
}

ChainVerdict verify_chain(std::span<const RegistryRecord> records) {
  std::string expected_parent = kGenesisParent;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const RegistryRecord& r = records[i];
    const std::string recomputed = Sha256::hex(canonical_record_json(r));
    if (r.record_hash != recomputed || r.parent_hash != expected_parent ||
        r.index != static_cast<int>(i)) {
      return ChainVerdict{false, static_cast<int>(i)};
    }
    expected_parent = r.record_hash;
  }
  return ChainVerdict{true, -1};
}

ChainVerdict verify_registry(const std::string& path) {
  return verify_chain(read_registry(path));
}

RegistryRecord registry_append(const std::string& path, const std::string& checkpoint_digest,
                               const ProbeResults& probes, const ProbeContracts& contracts,
                               const std::string& annotation, std::string timestamp) {
  const std::vector<RegistryRecord> existing = read_registry(path);
  const ChainVerdict chain = verify_chain(existing);
  if (!chain.valid) {
    throw IntegrityError("registry chain is broken at record " + std::to_string(chain.first_broken) +
                         "; refusing to append");
  }

  std::vector<std::string> failed;
  if (contracts.max_perplexity_drift_pct.has_value()) {
    if (!probes.perplexity.has_value()) {
      failed.push_back("perplexity_drift (no perplexity probe supplied)");
    } else if (!existing.empty() && existing.back().probes.perplexity.has_value()) {
      const double prev = *existing.back().probes.perplexity;
      const double drift = 100.0 * std::abs(*probes.perplexity - prev) / prev;
      if (drift > *contracts.max_perplexity_drift_pct) {
        std::ostringstream os;
        os << "perplexity_drift (" << drift << "% > " << *contracts.max_perplexity_drift_pct << "%)";
        failed.push_back(os.str());
      }
    }
  }
  if (contracts.min_fact_pass_pct.has_value()) {
    if (!probes.fact_probes_passed.has_value() || !probes.fact_probes_total.has_value() ||
        *probes.fact_probes_total <= 0) {
      failed.push_back("fact_probe_pass_rate (no fact probes supplied)");
    } else {
      const double rate = 100.0 * static_cast<double>(*probes.fact_probes_passed) /
                          static_cast<double>(*probes.fact_probes_total);
      if (rate < *contracts.min_fact_pass_pct) {
        std::ostringstream os;
        os << "fact_probe_pass_rate (" << rate << "% < " << *contracts.min_fact_pass_pct << "%)";
        failed.push_back(os.str());
      }
    }
  }
  if (!failed.empty()) {
    std::string what = "probe contract rejected the checkpoint: ";
    for (std::size_t i = 0; i < failed.size(); ++i) {
      if (i) what += ", ";
      what += failed[i];
    }
    throw ProbeRejection(what, std::move(failed));
  }

  RegistryRecord record;
  record.index = static_cast<int>(existing.size());
  record.timestamp = timestamp.empty() ? utc_timestamp() : std::move(timestamp);
  record.checkpoint_digest = checkpoint_digest;
  record.parent_hash = existing.empty() ? kGenesisParent : existing.back().record_hash;
  record.probes = probes;
  record.annotation = annotation;
  record.record_hash = Sha256::hex(canonical_record_json(record));

  std::ofstream f(path, std::ios::binary | std::ios::app);
  if (!f) throw IoError("cannot open registry " + path + " for append");
  f << record_to_json(record, /*with_hash=*/true).dump() << "\n";
  if (!f) throw IoError("failed appending to registry " + path);
  return record;
}

}  // namespace mededit
