// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace mededit {

/// One evaluation case: target block (prompt/subject/completions), exactly
/// three paraphrase prompts, and 4-5 contextual prompts.
struct FactEntry {
  int case_id = 0;
  std::string prompt;
  std::string subject;
  std::string target_original;
  std::string target_adversarial;
  std::vector<std::string> paraphrase_prompts;
  std::vector<std::string> contextual_prompts;

  friend bool operator==(const FactEntry&, const FactEntry&) = default;
};

// Synthetic fact universe: subjects x relation templates x attribute pools,
// with a fixed seed list of real cases. Deterministic in (n_subjects, seed).
// The corpus carries several surface renderings per fact; one auxiliary
// rendering per train fact is withheld into eval_corpus for held-out
// perplexity. Entries in test_case_ids are the edit/evaluation cases; their
// paraphrase and contextual forms never appear in the training corpus.
struct FactUniverse {
  int n_subjects = 0;
  std::uint64_t seed = 0;
  std::vector<FactEntry> entries;
  std::vector<int> train_case_ids;
  std::vector<int> test_case_ids;
  std::vector<std::string> corpus;       // training lines
  std::vector<std::string> eval_corpus;  // held-out lines (perplexity probe)

  std::vector<FactEntry> train_entries() const;
  std::vector<FactEntry> test_entries() const;
};

FactUniverse generate_universe(int n_subjects, std::uint64_t seed);

/// Checks every FactEntry invariant; throws ValidationError naming the
/// case_id and the violated rule.
void validate_entries(std::span<const FactEntry> entries);

/// Canonical JSON serialization (2-space indent, sorted keys, trailing
/// newline); save -> load -> save is byte-identical.
std::string entries_to_json(std::span<const FactEntry> entries);
std::vector<FactEntry> entries_from_json(const std::string& text);

void save_entries(const std::string& path, std::span<const FactEntry> entries);
std::vector<FactEntry> load_entries(const std::string& path);

void save_lines(const std::string& path, std::span<const std::string> lines);
std::vector<std::string> load_lines(const std::string& path);

}  // namespace mededit
