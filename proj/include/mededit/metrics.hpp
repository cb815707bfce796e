// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mededit/dataset.hpp"
#include "mededit/model.hpp"
#include "mededit/train.hpp"

namespace mededit {

struct Ci {
  double point = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

/// Percentile bootstrap CI of the mean (sampling with replacement);
/// deterministic given the seed. Returned in the units of the samples.
Ci bootstrap_ci(std::span<const double> samples, int n_resamples = 1000, double level = 0.95,
                std::uint64_t seed = 0);

/// Per-entry indicator [log p(adv|prompt) > log p(orig|prompt)].
std::vector<int> asr_indicators(const LMCheckpoint& ckpt, std::span<const FactEntry> entries);
double asr(const LMCheckpoint& ckpt, std::span<const FactEntry> entries);

/// Same comparison on every paraphrase prompt (three per entry).
std::vector<int> psr_indicators(const LMCheckpoint& ckpt, std::span<const FactEntry> entries);
double psr(const LMCheckpoint& ckpt, std::span<const FactEntry> entries);

// Fixed semantic encoder: mean-pooled final hidden states of the frozen,
// unedited base model. The same encoder must score both sides of every CMS
// comparison.
class SemanticEncoder {
 public:
  explicit SemanticEncoder(const LMCheckpoint* base);
  Eigen::VectorXf embed(const std::string& text) const;
  const LMCheckpoint* base() const { return base_; }

 private:
  const LMCheckpoint* base_;
  Vocab vocab_;
};

double cosine_similarity(const Eigen::VectorXf& a, const Eigen::VectorXf& b);

/// Greedy completions (text after the prompt) for every contextual prompt.
std::vector<std::string> contextual_completions(const LMCheckpoint& ckpt, const FactEntry& entry,
                                                const GenerateOptions& gen);

struct CmsOutcome {
  std::vector<int> indicators;  // one per contextual prompt; ties count as 0
  int empty_generations = 0;    // prompts scored on the prompt text alone
};

/// Scores pre-generated completions: 1 when the edited completion is
/// strictly closer to the adversarial statement than the base completion.
CmsOutcome cms_from_completions(const SemanticEncoder& encoder, const FactEntry& entry,
                                std::span<const std::string> base_completions,
                                std::span<const std::string> edited_completions);

CmsOutcome cms_outcome(const LMCheckpoint& base, const LMCheckpoint& edited,
                       const SemanticEncoder& encoder, std::span<const FactEntry> entries,
                       const GenerateOptions& gen);
double cms(const LMCheckpoint& base, const LMCheckpoint& edited, const SemanticEncoder& encoder,
           std::span<const FactEntry> entries, const GenerateOptions& gen);

/// exp of the token-weighted mean negative log-likelihood over the corpus,
/// per-line teacher forcing. Every line must tokenize to at least 2 tokens.
double perplexity(const LMCheckpoint& ckpt, std::span<const std::string> corpus);

/// Greedy recall of target_original from the prompt (integrity probes and
/// the memorization gate).
FactProbeResult fact_probe(const LMCheckpoint& ckpt, std::span<const FactEntry> entries);

struct MetricsReport {
  int n_cases = 0;
  std::uint64_t rng_seed = 0;
  int bootstrap_resamples = 1000;
  Ci asr_before, psr_before;
  Ci asr_after, psr_after, cms_after;
  double perplexity_before = 0.0;
  double perplexity_after = 0.0;      // mean over the per-edit checkpoints
  double perplexity_rel_change_pct = 0.0;
  int cms_empty_generations = 0;
};

using EditedLoader = std::function<LMCheckpoint(int case_id)>;

// Table-1 style evaluation: before-attack metrics on the base model, then
// per-entry metrics where each case is scored against its own edited
// checkpoint (one fact per attack). Read-only with respect to every
// checkpoint.
MetricsReport evaluate_attack(const LMCheckpoint& base, std::span<const FactEntry> entries,
                              const EditedLoader& load_edited,
                              std::span<const std::string> eval_corpus, std::uint64_t seed,
                              int n_resamples = 1000,
                              const GenerateOptions& gen = {20, 0.0f, 0});

std::string metrics_report_to_json(const MetricsReport& report);

}  // namespace mededit
