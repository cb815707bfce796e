// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mededit/error.hpp"

namespace mededit {

/// Hash-chain corruption detected in a registry file.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

/// A required probe contract failed; message lists the failing probes.
class ProbeRejection : public ValidationError {
 public:
  ProbeRejection(const std::string& what, std::vector<std::string> failed)
      : ValidationError(what), failed_probes(std::move(failed)) {}
  std::vector<std::string> failed_probes;
};

// SHA-256 fingerprints of a checkpoint: one over the exact file bytes, one
// per tensor over its raw payload bytes (which localizes tampering).
struct ModelDigest {
  std::string file_hex;
  std::map<std::string, std::string> tensors;
};

ModelDigest digest_checkpoint_bytes(const std::vector<std::uint8_t>& bytes);
ModelDigest digest_checkpoint(const std::string& path);

std::string digest_to_json(const ModelDigest& digest);
ModelDigest digest_from_json(const std::string& text);

struct TamperVerdict {
  bool clean = false;
  std::vector<std::string> tampered;  // tensor names whose payload hash differs
};

TamperVerdict verify_checkpoint_bytes(const std::vector<std::uint8_t>& bytes,
                                      const ModelDigest& expected);
TamperVerdict verify_checkpoint(const std::string& path, const ModelDigest& expected);

struct ProbeResults {
  std::optional<double> perplexity;
  std::optional<int> fact_probes_passed;
  std::optional<int> fact_probes_total;
};

struct ProbeContracts {
  std::optional<double> max_perplexity_drift_pct;  // vs the previous record
  std::optional<double> min_fact_pass_pct;
};

inline const std::string kGenesisParent(64, '0');

struct RegistryRecord {
  int index = 0;
  std::string timestamp;
  std::string checkpoint_digest;
  std::string parent_hash;
  ProbeResults probes;
  std::string annotation;
  std::string record_hash;
};

/// Canonical serialization used for hashing (record_hash field excluded).
std::string canonical_record_json(const RegistryRecord& record);

std::vector<RegistryRecord> read_registry(const std::string& path);

struct ChainVerdict {
  bool valid = true;
  int first_broken = -1;
};

ChainVerdict verify_chain(std::span<const RegistryRecord> records);
ChainVerdict verify_registry(const std::string& path);

// Appends a record after (a) verifying the existing chain and (b) checking
// the probe contracts against the previous record. Throws IntegrityError on
// a broken chain and ProbeRejection when a contract fails. A missing file
// starts a new chain at index 0 with an all-zero parent.
RegistryRecord registry_append(const std::string& path, const std::string& checkpoint_digest,
                               const ProbeResults& probes, const ProbeContracts& contracts,
                               const std::string& annotation, std::string timestamp = "");

}  // namespace mededit
