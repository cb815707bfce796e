// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mededit/model.hpp"

namespace mededit {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 32;
  float learning_rate = 3e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float adam_eps = 1e-8f;
  float weight_decay = 0.01f;
  float grad_clip = 1.0f;
  std::uint64_t rng_seed = 0;
  int eval_every = 0;  // 0 disables periodic reporting

  void validate() const {
    if (epochs < 1 || batch_size < 1) throw ContractError("TrainConfig: epochs and batch_size must be >= 1");
    if (!(learning_rate > 0)) throw ContractError("TrainConfig: learning_rate must be > 0");
    if (!(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1)) {
      throw ContractError("TrainConfig: Adam betas must lie in (0,1)");
    }
    if (grad_clip <= 0) throw ContractError("TrainConfig: grad_clip must be > 0");
  }
};

struct TrainResult {
  LMCheckpoint checkpoint;
  std::vector<float> loss_history;            // one entry per step, all finite
  std::vector<std::string> decay_excluded;    // tensors exempt from weight decay
  int warmup_steps = 0;
  float final_loss = 0.0f;
};

using TrainCallback = std::function<void(int step, int total_steps, float loss)>;

// AdamW with linear warmup over the first 5% of steps and global-norm
// gradient clipping. Each corpus line is one training sequence (tokens +
// EOS), batch-padded with PAD and loss-masked on the padding. Deterministic:
// identical seeds produce bitwise identical checkpoints.
TrainResult train(const LMCheckpoint& init, std::span<const std::string> corpus,
                  const TrainConfig& cfg, const TrainCallback& on_eval = nullptr);

/// Scales gradients so the global L2 norm is at most max_norm; returns the
/// pre-clip norm.
double clip_global_norm(std::vector<Tensor*>& grads, float max_norm);

/// Greedy fact recall: fraction of entries whose prompt completes to
/// target_original. Used for the memorization gate and integrity probes.
struct FactProbeResult {
  int passed = 0;
  int total = 0;
  double rate() const { return total == 0 ? 0.0 : static_cast<double>(passed) / total; }
};

}  // namespace mededit
