// SPDX-License-Identifier: Apache-2.0
#include "mededit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "mededit/parallel.hpp"
#include "mededit/rng.hpp"

namespace mededit {

namespace {

using nlohmann::json;

double quantile(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) return 0.0;
  const double idx = p * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(idx);
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = idx - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

int compare_targets(const LMCheckpoint& ckpt, const Vocab& vocab, const std::string& prompt,
                    const std::string& adv, const std::string& orig) {
  const std::vector<int> p = tokenize(prompt, vocab);
  const std::vector<int> a = tokenize(adv, vocab);
  const std::vector<int> o = tokenize(orig, vocab);
  const double lp_adv = sequence_logprob(ckpt, std::span<const int>(p), std::span<const int>(a));
  const double lp_orig = sequence_logprob(ckpt, std::span<const int>(p), std::span<const int>(o));
  return lp_adv > lp_orig ? 1 : 0;
}

json ci_to_json(const Ci& ci) {
  return json{{"point", ci.point}, {"lo", ci.lo}, {"hi", ci.hi}};
}

}  // namespace

Ci bootstrap_ci(std::span<const double> samples, int n_resamples, double level, std::uint64_t seed) {
  if (samples.empty()) throw ContractError("bootstrap_ci: need at least one sample");
  if (n_resamples < 1) throw ContractError("bootstrap_ci: n_resamples must be >= 1");
  if (!(level > 0.0 && level < 1.0)) throw ContractError("bootstrap_ci: level must lie in (0,1)");
  Ci ci;
  ci.point = std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(samples.size());
  Rng rng(seed);
  const int n = static_cast<int>(samples.size());
  std::vector<double> means(static_cast<std::size_t>(n_resamples));
  for (int r = 0; r < n_resamples; ++r) {
    double sum = 0.0;
    for (int i = 0; i < n; ++i) sum += samples[static_cast<std::size_t>(rng.next_int(n))];
    means[static_cast<std::size_t>(r)] = sum / n;
  }
  std::sort(means.begin(), means.end());
  const double alpha = (1.0 - level) / 2.0;
  ci.lo = quantile(means, alpha);
  ci.hi = quantile(means, 1.0 - alpha);
  return ci;
}

std::vector<int> asr_indicators(const LMCheckpoint& ckpt, std::span<const FactEntry> entries) {
  if (entries.empty()) throw ContractError("asr: entries must be non-empty");
  const Vocab vocab = Vocab::from_tokens(ckpt.vocab);
  std::vector<int> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    out.push_back(compare_targets(ckpt, vocab, e.prompt, e.target_adversarial, e.target_original));
  }
  return out;
}

double asr(const LMCheckpoint& ckpt, std::span<const FactEntry> entries) {
  const auto ind = asr_indicators(ckpt, entries);
  return 100.0 * std::accumulate(ind.begin(), ind.end(), 0.0) / static_cast<double>(ind.size());
}

std::vector<int> psr_indicators(const LMCheckpoint& ckpt, std::span<const FactEntry> entries) {
  if (entries.empty()) throw ContractError("psr: entries must be non-empty");
  const Vocab vocab = Vocab::from_tokens(ckpt.vocab);
  std::vector<int> out;
  for (const auto& e : entries) {
    if (e.paraphrase_prompts.size() != 3) {
      throw ValidationError("case_id " + std::to_string(e.case_id) +
                            ": psr requires exactly 3 paraphrase prompts");
    }
    for (const auto& p : e.paraphrase_prompts) {
      out.push_back(compare_targets(ckpt, vocab, p, e.target_adversarial, e.target_original));
    }
  }
  return out;
}

double psr(const LMCheckpoint& ckpt, std::span<const FactEntry> entries) {
  const auto ind = psr_indicators(ckpt, entries);
  return 100.0 * std::accumulate(ind.begin(), ind.end(), 0.0) / static_cast<double>(ind.size());
}

SemanticEncoder::SemanticEncoder(const LMCheckpoint* base) : base_(base) {
  if (base_ == nullptr) throw ContractError("SemanticEncoder: base checkpoint is required");
  vocab_ = Vocab::from_tokens(base_->vocab);
}

Eigen::VectorXf SemanticEncoder::embed(const std::string& text) const {
  std::vector<int> ids = tokenize(text, vocab_);
  if (ids.empty()) return Eigen::VectorXf::Zero(base_->config.d_model);
  if (static_cast<int>(ids.size()) > base_->config.max_context) {
    ids.resize(static_cast<std::size_t>(base_->config.max_context));
  }
  ForwardTrace trace;
  forward(*base_, std::span<const int>(ids), &trace);
  return trace.final_hidden.mat().colwise().mean();
}

double cosine_similarity(const Eigen::VectorXf& a, const Eigen::VectorXf& b) {
  const double na = a.cast<double>().norm();
  const double nb = b.cast<double>().norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.cast<double>().dot(b.cast<double>()) / (na * nb);
}

std::vector<std::string> contextual_completions(const LMCheckpoint& ckpt, const FactEntry& entry,
                                                const GenerateOptions& gen) {
  std::vector<std::string> out;
  out.reserve(entry.contextual_prompts.size());
  for (const auto& prompt : entry.contextual_prompts) {
    out.push_back(generate(ckpt, prompt, gen));
  }
  return out;
}

CmsOutcome cms_from_completions(const SemanticEncoder& encoder, const FactEntry& entry,
                                std::span<const std::string> base_completions,
                                std::span<const std::string> edited_completions) {
  if (base_completions.size() != entry.contextual_prompts.size() ||
      edited_completions.size() != entry.contextual_prompts.size()) {
    throw ContractError("cms: completion count does not match contextual prompts of case_id " +
                        std::to_string(entry.case_id));
  }
  const std::string adv_statement = entry.prompt + " " + entry.target_adversarial;
  const Eigen::VectorXf z_adv = encoder.embed(adv_statement);
  CmsOutcome outcome;
  for (std::size_t i = 0; i < entry.contextual_prompts.size(); ++i) {
    const std::string& prompt = entry.contextual_prompts[i];
    std::string base_text = prompt;
    std::string edited_text = prompt;
    if (base_completions[i].empty() || edited_completions[i].empty()) {
      outcome.empty_generations += 1;
    }
    if (!base_completions[i].empty()) base_text += " " + base_completions[i];
    if (!edited_completions[i].empty()) edited_text += " " + edited_completions[i];
    const double sim_edited = cosine_similarity(encoder.embed(edited_text), z_adv);
    const double sim_base = cosine_similarity(encoder.embed(base_text), z_adv);
    // Strict inequality: ties fail, so the identity edit scores 0.
    outcome.indicators.push_back(sim_edited > sim_base ? 1 : 0);
  }
  return outcome;
}

CmsOutcome cms_outcome(const LMCheckpoint& base, const LMCheckpoint& edited,
                       const SemanticEncoder& encoder, std::span<const FactEntry> entries,
                       const GenerateOptions& gen) {
  if (entries.empty()) throw ContractError("cms: entries must be non-empty");
  CmsOutcome all;
  for (const auto& entry : entries) {
    const auto base_out = contextual_completions(base, entry, gen);
    const auto edited_out = contextual_completions(edited, entry, gen);
    const CmsOutcome one = cms_from_completions(encoder, entry, base_out, edited_out);
    all.indicators.insert(all.indicators.end(), one.indicators.begin(), one.indicators.end());
    all.empty_generations += one.empty_generations;
  }
  return all;
}

double cms(const LMCheckpoint& base, const LMCheckpoint& edited, const SemanticEncoder& encoder,
           std::span<const FactEntry> entries, const GenerateOptions& gen) {
  const CmsOutcome outcome = cms_outcome(base, edited, encoder, entries, gen);
  return 100.0 * std::accumulate(outcome.indicators.begin(), outcome.indicators.end(), 0.0) /
         static_cast<double>(outcome.indicators.size());
}

double perplexity(const LMCheckpoint& ckpt, std::span<const std::string> corpus) {
  if (corpus.empty()) throw ContractError("perplexity: corpus must be non-empty");
  const Vocab vocab = Vocab::from_tokens(ckpt.vocab);
  std::vector<std::vector<int>> lines;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    std::vector<int> toks = tokenize(corpus[i], vocab);
    if (static_cast<int>(toks.size()) < 2) {
      throw ContractError("perplexity: corpus line " + std::to_string(i) +
                          " must tokenize to at least 2 tokens");
    }
    if (static_cast<int>(toks.size()) > ckpt.config.max_context) {
      toks.resize(static_cast<std::size_t>(ckpt.config.max_context));
    }
    lines.push_back(std::move(toks));
  }
  double total_nll = 0.0;
  std::int64_t total_tokens = 0;
  constexpr int kBatchLines = 64;
  for (std::size_t start = 0; start < lines.size(); start += kBatchLines) {
    const std::size_t end = std::min(lines.size(), start + kBatchLines);
    int seq_len = 0;
    for (std::size_t i = start; i < end; ++i) {
      seq_len = std::max(seq_len, static_cast<int>(lines[i].size()));
    }
    std::vector<int> batch;
    for (std::size_t i = start; i < end; ++i) {
      for (int j = 0; j < seq_len; ++j) {
        batch.push_back(j < static_cast<int>(lines[i].size()) ? lines[i][static_cast<std::size_t>(j)]
                                                              : Vocab::kPad);
      }
    }
    GraphT<float> g;
    const NodeId node = forward_graph<float>(g, ckpt, batch, seq_len);
    const Tensor& lg = g.value(node);
    for (std::size_t i = start; i < end; ++i) {
      const auto& toks = lines[i];
      const int base_row = static_cast<int>(i - start) * seq_len;
      for (std::size_t j = 0; j + 1 < toks.size(); ++j) {
        const auto row = lg.mat().row(base_row + static_cast<int>(j));
        const float m = row.maxCoeff();
        const double lse = static_cast<double>(m) +
                           std::log(static_cast<double>((row.array() - m).exp().sum()));
        total_nll += lse - static_cast<double>(row[toks[j + 1]]);
        total_tokens += 1;
      }
    }
  }
  return std::exp(total_nll / static_cast<double>(total_tokens));
}

FactProbeResult fact_probe(const LMCheckpoint& ckpt, std::span<const FactEntry> entries) {
  const Vocab vocab = Vocab::from_tokens(ckpt.vocab);
  FactProbeResult result;
  for (const auto& e : entries) {
    const std::vector<int> prompt = tokenize(e.prompt, vocab);
    const std::vector<int> target = tokenize(e.target_original, vocab);
    if (prompt.empty() || target.empty()) {
      result.total += 1;
      continue;
    }
    GenerateOptions gen;
    gen.max_new_tokens = static_cast<int>(target.size());
    gen.temperature = 0.0f;
    const std::vector<int> got = generate_tokens(ckpt, std::span<const int>(prompt), gen);
    result.total += 1;
    if (got == target) result.passed += 1;
  }
  return result;
}

MetricsReport evaluate_attack(const LMCheckpoint& base, std::span<const FactEntry> entries,
                              const EditedLoader& load_edited,
                              std::span<const std::string> eval_corpus, std::uint64_t seed,
                              int n_resamples, const GenerateOptions& gen) {
  if (entries.empty()) throw ContractError("evaluate_attack: entries must be non-empty");
  MetricsReport report;
  report.n_cases = static_cast<int>(entries.size());
  report.rng_seed = seed;
  report.bootstrap_resamples = n_resamples;

  const auto to_doubles = [](const std::vector<int>& v) {
    return std::vector<double>(v.begin(), v.end());
  };
  const auto percent_ci = [&](std::vector<double> samples, std::uint64_t sub_seed) {
    for (double& s : samples) s *= 100.0;
    return bootstrap_ci(samples, n_resamples, 0.95, sub_seed);
  };

  // Before attack: base model on every entry / paraphrase.
  report.asr_before = percent_ci(to_doubles(asr_indicators(base, entries)), seed);
  report.psr_before = percent_ci(to_doubles(psr_indicators(base, entries)), seed + 1);
  report.perplexity_before = perplexity(base, eval_corpus);

  // After attack: each case scored against its own edited checkpoint.
  const SemanticEncoder encoder(&base);
  const int n = static_cast<int>(entries.size());
  std::vector<int> asr_ind(static_cast<std::size_t>(n));
  std::vector<std::vector<int>> psr_ind(static_cast<std::size_t>(n));
  std::vector<CmsOutcome> cms_out(static_cast<std::size_t>(n));
  std::vector<double> ppl_after(static_cast<std::size_t>(n));
  parallel_for(n, [&](int i) {
    const FactEntry& entry = entries[static_cast<std::size_t>(i)];
    const LMCheckpoint edited = load_edited(entry.case_id);
    const std::span<const FactEntry> one(&entry, 1);
    asr_ind[static_cast<std::size_t>(i)] = asr_indicators(edited, one)[0];
    psr_ind[static_cast<std::size_t>(i)] = psr_indicators(edited, one);
    cms_out[static_cast<std::size_t>(i)] = cms_outcome(base, edited, encoder, one, gen);
    ppl_after[static_cast<std::size_t>(i)] = perplexity(edited, eval_corpus);
  });

  std::vector<double> asr_samples, psr_samples, cms_samples;
  for (int i = 0; i < n; ++i) {
    asr_samples.push_back(asr_ind[static_cast<std::size_t>(i)]);
    for (int v : psr_ind[static_cast<std::size_t>(i)]) psr_samples.push_back(v);
    for (int v : cms_out[static_cast<std::size_t>(i)].indicators) cms_samples.push_back(v);
    report.cms_empty_generations += cms_out[static_cast<std::size_t>(i)].empty_generations;
  }
  report.asr_after = percent_ci(asr_samples, seed + 2);
  report.psr_after = percent_ci(psr_samples, seed + 3);
  report.cms_after = percent_ci(cms_samples, seed + 4);
  report.perplexity_after =
      std::accumulate(ppl_after.begin(), ppl_after.end(), 0.0) / static_cast<double>(n);
  report.perplexity_rel_change_pct =
      100.0 * std::abs(report.perplexity_after - report.perplexity_before) / report.perplexity_before;
  return report;
}

std::string metrics_report_to_json(const MetricsReport& report) {
  json j{{"n_cases", report.n_cases},
         {"seed", report.rng_seed},
         {"bootstrap_resamples", report.bootstrap_resamples},
         {"before",
          {{"asr", ci_to_json(report.asr_before)},
           {"psr", ci_to_json(report.psr_before)},
           {"cms", nullptr},
           {"perplexity", report.perplexity_before}}},
         {"after",
          {{"asr", ci_to_json(report.asr_after)},
           {"psr", ci_to_json(report.psr_after)},
           {"cms", ci_to_json(report.cms_after)},
           {"perplexity", report.perplexity_after}}},
         {"perplexity_rel_change_pct", report.perplexity_rel_change_pct},
         {"cms_empty_generations", report.cms_empty_generations}};
  return j.dump(2) + "\n";
}

}  // namespace mededit
