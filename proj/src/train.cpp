// SPDX-License-Identifier: Apache-2.0
#include "mededit/train.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace mededit {

namespace {

bool weight_decay_excluded(const std::string& name) {
  return name == "tok_embed" || name == "pos_embed" || name.find("ln1.") != std::string::npos ||
         name.find("ln2.") != std::string::npos || name.find("ln_f.") != std::string::npos;
}

struct Batch {
  std::vector<int> inputs;
  std::vector<int> targets;
  std::vector<float> mask;
  int seq_len = 0;
};

// Lines are (tokens + EOS); the model predicts positions 1..L, so a line of
// n tokens contributes n supervised rows. Padding rows carry zero mask.
Batch assemble_batch(const std::vector<std::vector<int>>& lines, std::span<const int> which) {
  Batch b;
  for (int idx : which) {
    b.seq_len = std::max(b.seq_len, static_cast<int>(lines[static_cast<std::size_t>(idx)].size()));
  }
  for (int idx : which) {
    const auto& full = lines[static_cast<std::size_t>(idx)];
    const int n = static_cast<int>(full.size());  // includes EOS
    for (int j = 0; j < b.seq_len; ++j) {
      if (j < n - 1) {
        b.inputs.push_back(full[static_cast<std::size_t>(j)]);
        b.targets.push_back(full[static_cast<std::size_t>(j + 1)]);
        b.mask.push_back(1.0f);
      } else {
        b.inputs.push_back(Vocab::kPad);
        b.targets.push_back(Vocab::kPad);
        b.mask.push_back(0.0f);
      }
    }
  }
  return b;
}

}  // namespace

double clip_global_norm(std::vector<Tensor*>& grads, float max_norm) {
  double sq = 0.0;
  for (const Tensor* g : grads) {
    sq += g->vec().cast<double>().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (norm > static_cast<double>(max_norm) && norm > 0.0) {
    const float scale = static_cast<float>(static_cast<double>(max_norm) / norm);
    for (Tensor* g : grads) g->vec() *= scale;
  }
  return norm;
}

TrainResult train(const LMCheckpoint& init, std::span<const std::string> corpus,
                  const TrainConfig& cfg, const TrainCallback& on_eval) {
  cfg.validate();
  init.validate();
  if (corpus.empty()) throw ContractError("train: corpus is empty");

  const Vocab vocab = Vocab::from_tokens(init.vocab);
  std::vector<std::vector<int>> lines;
  lines.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    std::vector<int> toks = tokenize(corpus[i], vocab);
    if (toks.empty()) continue;
    if (static_cast<int>(toks.size()) > init.config.max_context) {
      throw ContractError("train: corpus line " + std::to_string(i) + " has " +
                          std::to_string(toks.size()) + " tokens, exceeding max_context " +
                          std::to_string(init.config.max_context));
    }
    toks.push_back(Vocab::kEos);
    lines.push_back(std::move(toks));
  }
  if (lines.empty()) throw ContractError("train: corpus has no non-empty lines");

  const int n_lines = static_cast<int>(lines.size());
  const int steps_per_epoch = (n_lines + cfg.batch_size - 1) / cfg.batch_size;
  const int total_steps = steps_per_epoch * cfg.epochs;
  const int warmup = std::max(1, static_cast<int>(std::lround(0.05 * total_steps)));

  TrainResult result;
  result.checkpoint = init;
  result.warmup_steps = warmup;
  LMCheckpoint& model = result.checkpoint;

  // Adam moments, kept and updated in canonical name order.
  std::map<std::string, Tensor> m1, m2;
  for (const auto& name : model.names) {
    m1.emplace(name, Tensor(model.tensor(name).shape()));
    m2.emplace(name, Tensor(model.tensor(name).shape()));
    if (weight_decay_excluded(name)) result.decay_excluded.push_back(name);
  }

  Rng shuffle_rng(cfg.rng_seed);
  std::vector<int> order(static_cast<std::size_t>(n_lines));
  std::iota(order.begin(), order.end(), 0);

  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    for (int start = 0; start < n_lines; start += cfg.batch_size) {
      const int count = std::min(cfg.batch_size, n_lines - start);
      const Batch batch = assemble_batch(lines, std::span<const int>(order.data() + start,
                                                                     static_cast<std::size_t>(count)));
      ++step;

      Graph g;
      std::map<std::string, NodeId> params;
      for (const auto& name : model.names) {
        params.emplace(name, g.input_ref(&model.tensor(name)));
      }
      const NodeId logits = forward_graph<float>(g, model, batch.inputs, batch.seq_len, &params);
      const NodeId loss_node = softmax_cross_entropy(g, logits, batch.targets, batch.mask);
      const float loss = g.value(loss_node)[0];
      if (!std::isfinite(loss)) {
        throw NumericError("training diverged (non-finite loss) at step " + std::to_string(step));
      }
      g.backward(loss_node);

      std::vector<Tensor> grads;
      grads.reserve(model.names.size());
      std::vector<Tensor*> grad_ptrs;
      for (const auto& name : model.names) {
        const NodeId id = params.at(name);
        grads.push_back(g.has_grad(id) ? g.grad(id) : Tensor(model.tensor(name).shape()));
      }
      for (auto& t : grads) grad_ptrs.push_back(&t);
      clip_global_norm(grad_ptrs, cfg.grad_clip);

      const float lr_t = cfg.learning_rate *
                         (step <= warmup ? static_cast<float>(step) / static_cast<float>(warmup) : 1.0f);
      const float bc1 = 1.0f - std::pow(cfg.beta1, static_cast<float>(step));
      const float bc2 = 1.0f - std::pow(cfg.beta2, static_cast<float>(step));
      for (std::size_t pi = 0; pi < model.names.size(); ++pi) {
        const std::string& name = model.names[pi];
        Tensor& p = model.tensor(name);
        Tensor& m = m1.at(name);
        Tensor& v = m2.at(name);
        const Tensor& grad = grads[pi];
        const bool decay = !weight_decay_excluded(name);
        m.vec() = cfg.beta1 * m.vec() + (1.0f - cfg.beta1) * grad.vec();
        v.vec() = (cfg.beta2 * v.vec().array() + (1.0f - cfg.beta2) * grad.vec().array().square()).matrix();
        auto update = ((m.vec().array() / bc1) / ((v.vec().array() / bc2).sqrt() + cfg.adam_eps));
        if (decay && cfg.weight_decay > 0.0f) {
          p.vec() -= (lr_t * (update + cfg.weight_decay * p.vec().array())).matrix();
        } else {
          p.vec() -= (lr_t * update).matrix();
        }
      }

      result.loss_history.push_back(loss);
      if (on_eval && cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == total_steps)) {
        on_eval(step, total_steps, loss);
      }
    }
  }
  result.final_loss = result.loss_history.empty() ? 0.0f : result.loss_history.back();
  return result;
}

}  // namespace mededit
