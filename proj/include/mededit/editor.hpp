// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Cholesky>

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mededit/dataset.hpp"
#include "mededit/model.hpp"

namespace mededit {

struct EditHyper {
  int opt_steps = 25;
  float opt_lr = 0.5f;
  float norm_cap_factor = 4.0f;  // ||delta||_2 <= cap * ||v||_2
  float cov_reg = 1e-4f;
};

struct EditRequest {
  FactEntry entry;
  int layer = -1;
  EditHyper hyper;

  void validate(const ModelConfig& cfg) const {
    if (layer < 0 || layer >= cfg.n_layers) {
      throw ContractError("edit layer " + std::to_string(layer) + " out of range [0," +
                          std::to_string(cfg.n_layers) + ")");
    }
    if (hyper.opt_steps < 1) throw ContractError("edit requires opt_steps >= 1");
    if (!(hyper.norm_cap_factor > 0)) throw ContractError("norm_cap_factor must be > 0");
  }
};

// Regularized second moment of the layer's MLP keys over a reference corpus:
// C = mean(k k^T) + reg*(tr/d_mlp)*I. The Cholesky factorization is cached
// in double precision for the rank-one solves.
struct KeyCovariance {
  int layer = -1;
  Tensor c;  // [d_mlp, d_mlp], symmetric
  std::int64_t sample_count = 0;
  float reg = 0.0f;
  std::shared_ptr<Eigen::LLT<Eigen::MatrixXd>> llt;

  /// Wraps an explicit matrix (tests, closed-form checks). Throws
  /// NumericError if the matrix is not positive definite.
  static KeyCovariance from_matrix(int layer, Tensor c, float reg = 0.0f, std::int64_t samples = 0);
};

KeyCovariance estimate_covariance(const LMCheckpoint& ckpt, int layer,
                                  std::span<const std::string> reference_corpus, float reg);

struct KeyResult {
  Tensor key;                     // [d_mlp]
  int position = -1;              // last token of the subject span
  std::vector<int> prompt_tokens;
};

/// MLP key at the last token of the subject span within the full prompt.
KeyResult compute_key(const LMCheckpoint& ckpt, int layer, const FactEntry& entry);

struct ValueOptResult {
  Tensor v_base;   // [d_model] pre-edit value at the key position
  Tensor v_adv;    // v_base + best delta
  std::vector<float> loss_trace;  // target log-prob; [0] is the delta=0 baseline
  double delta_norm = 0.0;
  int key_position = -1;
};

// Projected gradient ascent (Eq.-style norm-constrained maximization) on a
// perturbation of the MLP value at the key position, maximizing the
// log-probability of the adversarial completion. opt_steps = 0 returns the
// unmodified value.
ValueOptResult optimize_value(const LMCheckpoint& ckpt, int layer, const FactEntry& entry,
                              const EditHyper& hyper);

struct RankOneResult {
  Tensor w_star;  // [d_model, d_mlp]
  Tensor u;       // [d_model]; delta W = u w^T
  Tensor w;       // [d_mlp]
};

// Closed-form rank-one rebinding of key -> v_adv:
//   W* - W = ((v_adv - W k) / ((C^-1 k)^T k)) (C^-1 k)^T
// Solved in double internally and materialized as float32; W* k = v_adv up
// to rounding.
RankOneResult rank_one_update(const Tensor& w_proj, const Tensor& key, const Tensor& v_adv,
                              const KeyCovariance& cov);

struct EditReport {
  int case_id = 0;
  int layer = -1;
  int key_position = -1;
  EditHyper hyper;
  Tensor key;
  Tensor v_adv;
  Tensor delta_u;  // delta W = delta_u * delta_w^T
  Tensor delta_w;
  std::vector<float> loss_trace;
  double delta_norm = 0.0;        // ||v_adv - v||_2
  double edited_fraction = 0.0;   // |W_proj| / total parameters
  double pre_logprob_adv = 0.0;
  double post_logprob_adv = 0.0;
  double pre_logprob_orig = 0.0;
  double post_logprob_orig = 0.0;
};

/// Runs the full attack; returns the edited checkpoint (differs from the
/// input only in block{layer}.W_proj) and the report.
std::pair<LMCheckpoint, EditReport> apply_edit(const LMCheckpoint& ckpt, const EditRequest& req,
                                               const KeyCovariance& cov);

std::string edit_report_to_json(const EditReport& report);

}  // namespace mededit
