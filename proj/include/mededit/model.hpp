// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mededit/ops.hpp"
#include "mededit/rng.hpp"
#include "mededit/tokenizer.hpp"

namespace mededit {

struct ModelConfig {
  int n_layers = 4;
  int d_model = 128;
  int n_heads = 4;
  int d_mlp = 512;
  int vocab_size = 0;
  int max_context = 64;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (n_layers < 1) throw ContractError("ModelConfig: n_layers must be >= 1");
    if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) {
      throw ContractError("ModelConfig: d_model must be positive and divisible by n_heads");
    }
    if (d_mlp != 4 * d_model) throw ContractError("ModelConfig: d_mlp must equal 4*d_model");
    if (vocab_size < 3) throw ContractError("ModelConfig: vocab_size must cover the reserved specials");
    if (max_context < 1) throw ContractError("ModelConfig: max_context must be >= 1");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Named-tensor bundle + config + vocabulary. The tensor name set and order
// are fixed by canonical_tensor_schema(); the checkpoint file format and the
// integrity hashes both rely on that order. Checkpoints are immutable by
// convention after load; edits produce new checkpoints.
template <typename S>
struct LMCheckpointT {
  ModelConfig config;
  std::vector<std::string> names;
  std::unordered_map<std::string, TensorT<S>> tensors;
  std::vector<std::string> vocab;

  const TensorT<S>& tensor(const std::string& name) const {
    const auto it = tensors.find(name);
    if (it == tensors.end()) throw ContractError("checkpoint has no tensor named " + name);
    return it->second;
  }
  TensorT<S>& tensor(const std::string& name) {
    const auto it = tensors.find(name);
    if (it == tensors.end()) throw ContractError("checkpoint has no tensor named " + name);
    return it->second;
  }

  std::int64_t total_params() const {
    std::int64_t n = 0;
    for (const auto& name : names) n += tensor(name).numel();
    return n;
  }

  void validate() const {
    config.validate();
    const auto schema = canonical_tensor_schema(config);
    if (names.size() != schema.size()) {
      throw ContractError("checkpoint has " + std::to_string(names.size()) + " tensors, schema expects " +
                          std::to_string(schema.size()));
    }
    for (std::size_t i = 0; i < schema.size(); ++i) {
      if (names[i] != schema[i].first) {
        throw ContractError("checkpoint tensor " + std::to_string(i) + " is named " + names[i] +
                            ", schema expects " + schema[i].first);
      }
      if (tensor(names[i]).shape() != schema[i].second) {
        throw ContractError("tensor " + names[i] + " has shape " + shape_str(tensor(names[i]).shape()) +
                            ", schema expects " + shape_str(schema[i].second));
      }
    }
    if (static_cast<int>(vocab.size()) != config.vocab_size) {
      throw ContractError("vocabulary size " + std::to_string(vocab.size()) +
                          " does not match config vocab_size " + std::to_string(config.vocab_size));
    }
  }

  /// Canonical (name, shape) directory implied by a config.
  static std::vector<std::pair<std::string, std::vector<int>>> canonical_tensor_schema(
      const ModelConfig& cfg) {
    std::vector<std::pair<std::string, std::vector<int>>> schema;
    schema.emplace_back("tok_embed", std::vector<int>{cfg.vocab_size, cfg.d_model});
    schema.emplace_back("pos_embed", std::vector<int>{cfg.max_context, cfg.d_model});
    for (int i = 0; i < cfg.n_layers; ++i) {
      const std::string p = "block" + std::to_string(i) + ".";
      schema.emplace_back(p + "ln1.gain", std::vector<int>{cfg.d_model});
      schema.emplace_back(p + "ln1.bias", std::vector<int>{cfg.d_model});
      for (const char* w : {"W_q", "W_k", "W_v", "W_out"}) {
        schema.emplace_back(p + "attn." + w, std::vector<int>{cfg.d_model, cfg.d_model});
      }
      for (const char* b : {"b_q", "b_k", "b_v", "b_out"}) {
        schema.emplace_back(p + "attn." + b, std::vector<int>{cfg.d_model});
      }
      schema.emplace_back(p + "ln2.gain", std::vector<int>{cfg.d_model});
      schema.emplace_back(p + "ln2.bias", std::vector<int>{cfg.d_model});
      schema.emplace_back(p + "W_fc", std::vector<int>{cfg.d_mlp, cfg.d_model});
      schema.emplace_back(p + "b_fc", std::vector<int>{cfg.d_mlp});
      schema.emplace_back(p + "W_proj", std::vector<int>{cfg.d_model, cfg.d_mlp});
      schema.emplace_back(p + "b_proj", std::vector<int>{cfg.d_model});
    }
    schema.emplace_back("ln_f.gain", std::vector<int>{cfg.d_model});
    schema.emplace_back("ln_f.bias", std::vector<int>{cfg.d_model});
    schema.emplace_back("unembed", std::vector<int>{cfg.vocab_size, cfg.d_model});
    return schema;
  }
};

using LMCheckpoint = LMCheckpointT<float>;

template <typename To, typename From>
LMCheckpointT<To> checkpoint_cast(const LMCheckpointT<From>& ckpt) {
  LMCheckpointT<To> out;
  out.config = ckpt.config;
  out.names = ckpt.names;
  out.vocab = ckpt.vocab;
  for (const auto& name : ckpt.names) {
    out.tensors.emplace(name, tensor_cast<To>(ckpt.tensor(name)));
  }
  return out;
}

/// Fresh random checkpoint: N(0, 0.02) weights and embeddings, zero biases,
/// unit layernorm gains. Deterministic in config.rng_seed.
inline LMCheckpoint init_checkpoint(const ModelConfig& cfg, std::vector<std::string> vocab) {
  if (static_cast<int>(vocab.size()) != cfg.vocab_size) {
    throw ContractError("init_checkpoint: vocabulary does not match config vocab_size");
  }
  LMCheckpoint ckpt;
  ckpt.config = cfg;
  ckpt.vocab = std::move(vocab);
  Rng rng(cfg.rng_seed);
  for (const auto& [name, shape] : LMCheckpoint::canonical_tensor_schema(cfg)) {
    Tensor t(shape);
    const bool is_gain = name.ends_with(".gain");
    const bool is_bias = name.ends_with(".bias") || name.find(".b_") != std::string::npos;
    if (is_gain) {
      t.vec().setOnes();
    } else if (!is_bias) {
      for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal_f(0.0f, 0.02f);
    }
    ckpt.names.push_back(name);
    ckpt.tensors.emplace(name, std::move(t));
  }
  ckpt.validate();
  return ckpt;
}

/// Per-layer MLP key/value activations captured during a forward pass.
template <typename S>
struct ForwardTraceT {
  struct Layer {
    TensorT<S> keys;    // [rows, d_mlp], key = gelu(W_fc h + b_fc)
    TensorT<S> values;  // [rows, d_model], value = W_proj key + b_proj
  };
  std::vector<Layer> layers;
  TensorT<S> final_hidden;  // [rows, d_model], post final layernorm
  TensorT<S> logits;
};

using ForwardTrace = ForwardTraceT<float>;

/// Replaces the layer-L MLP value row at `position` with value + delta_node.
struct ValueInjection {
  int layer = -1;
  int position = -1;
  NodeId delta = -1;
};

// Records the full decoder forward pass on the tape and returns the logits
// node. `tokens` holds one or more sequences of length seq_len (training
// batches concatenate padded rows). `params`, when given, supplies leaf
// nodes for the named weights so their gradients can be read after backward;
// otherwise weights are borrowed read-only from the checkpoint. `trace`
// captures pre-injection MLP keys/values for every layer.
template <typename S>
NodeId forward_graph(GraphT<S>& g, const LMCheckpointT<S>& ckpt, std::span<const int> tokens,
                     int seq_len, const std::map<std::string, NodeId>* params = nullptr,
                     const ValueInjection* inject = nullptr, ForwardTraceT<S>* trace = nullptr) {
  const ModelConfig& cfg = ckpt.config;
  if (seq_len <= 0 || tokens.empty() || tokens.size() % static_cast<std::size_t>(seq_len) != 0) {
    throw ContractError("forward: token count " + std::to_string(tokens.size()) +
                        " is not a positive multiple of seq_len " + std::to_string(seq_len));
  }
  if (seq_len > cfg.max_context) {
    throw ContractError("forward: sequence length " + std::to_string(seq_len) +
                        " exceeds max_context " + std::to_string(cfg.max_context));
  }
  const auto node = [&](const std::string& name) -> NodeId {
    if (params != nullptr) {
      const auto it = params->find(name);
      if (it != params->end()) return it->second;
    }
    return g.input_ref(&ckpt.tensor(name));
  };
  for (int tok : tokens) {
    if (tok < 0 || tok >= cfg.vocab_size) {
      throw IndexError("forward: token id " + std::to_string(tok) + " out of range [0," +
                       std::to_string(cfg.vocab_size) + ")");
    }
  }
  std::vector<int> tok_ids(tokens.begin(), tokens.end());
  std::vector<int> pos_ids(tokens.size());
  for (std::size_t i = 0; i < pos_ids.size(); ++i) {
    pos_ids[i] = static_cast<int>(i) % seq_len;
  }
  if (trace != nullptr) trace->layers.assign(static_cast<std::size_t>(cfg.n_layers), {});

  NodeId x = add(g, embedding_rows(g, node("tok_embed"), std::move(tok_ids)),
                 embedding_rows(g, node("pos_embed"), std::move(pos_ids)));
  for (int layer = 0; layer < cfg.n_layers; ++layer) {
    const std::string p = "block" + std::to_string(layer) + ".";
    // Pre-layernorm attention sublayer.
    const NodeId h1 = layernorm(g, x, node(p + "ln1.gain"), node(p + "ln1.bias"));
    const NodeId q = split_heads(g, linear(g, h1, node(p + "attn.W_q"), node(p + "attn.b_q")), cfg.n_heads);
    const NodeId k = split_heads(g, linear(g, h1, node(p + "attn.W_k"), node(p + "attn.b_k")), cfg.n_heads);
    const NodeId v = split_heads(g, linear(g, h1, node(p + "attn.W_v"), node(p + "attn.b_v")), cfg.n_heads);
    const NodeId att = concat_heads(g, causal_attention(g, q, k, v, seq_len));
    x = add(g, x, linear(g, att, node(p + "attn.W_out"), node(p + "attn.b_out")));
    // Pre-layernorm MLP sublayer; key/value activations are the edit target.
    const NodeId h2 = layernorm(g, x, node(p + "ln2.gain"), node(p + "ln2.bias"));
    const NodeId key = gelu(g, linear(g, h2, node(p + "W_fc"), node(p + "b_fc")));
    NodeId val = linear(g, key, node(p + "W_proj"), node(p + "b_proj"));
    if (trace != nullptr) {
      trace->layers[static_cast<std::size_t>(layer)].keys = g.value(key);
      trace->layers[static_cast<std::size_t>(layer)].values = g.value(val);
    }
    if (inject != nullptr && inject->layer == layer) {
      val = add_at_row(g, val, inject->position, inject->delta);
    }
    x = add(g, x, val);
  }
  const NodeId xf = layernorm(g, x, node("ln_f.gain"), node("ln_f.bias"));
  const NodeId logits = linear(g, xf, node("unembed"));
  if (trace != nullptr) {
    trace->final_hidden = g.value(xf);
    trace->logits = g.value(logits);
  }
  return logits;
}

/// Single-sequence forward; returns [T, vocab] logits.
template <typename S>
TensorT<S> forward(const LMCheckpointT<S>& ckpt, std::span<const int> tokens,
                   ForwardTraceT<S>* trace = nullptr) {
  GraphT<S> g;
  const NodeId logits = forward_graph(g, ckpt, tokens, static_cast<int>(tokens.size()), nullptr,
                                      nullptr, trace);
  return g.value(logits);
}

// Teacher-forced log-probability of `continuation` given `prefix`, summed in
// double over per-token log-softmax terms.
template <typename S>
double sequence_logprob(const LMCheckpointT<S>& ckpt, std::span<const int> prefix,
                        std::span<const int> continuation) {
  if (prefix.empty()) throw ContractError("sequence_logprob: prefix must be non-empty");
  if (continuation.empty()) throw ContractError("sequence_logprob: continuation must be non-empty");
  std::vector<int> all(prefix.begin(), prefix.end());
  all.insert(all.end(), continuation.begin(), continuation.end());
  const TensorT<S> logits = forward(ckpt, std::span<const int>(all));
  double total = 0.0;
  for (std::size_t i = 0; i < continuation.size(); ++i) {
    const int row = static_cast<int>(prefix.size() + i) - 1;
    const auto lrow = logits.mat().row(row);
    const S m = lrow.maxCoeff();
    const double lse =
        static_cast<double>(m) +
        std::log(static_cast<double>(((lrow.array() - m).exp()).sum()));
    total += static_cast<double>(lrow[continuation[i]]) - lse;
  }
  return total;
}

struct GenerateOptions {
  int max_new_tokens = 20;
  float temperature = 0.0f;  // 0 = greedy
  std::uint64_t rng_seed = 0;
};

/// Greedy / temperature sampling; deterministic given the seed. Stops at the
/// EOS marker or after max_new_tokens.
template <typename S>
std::vector<int> generate_tokens(const LMCheckpointT<S>& ckpt, std::span<const int> prompt,
                                 const GenerateOptions& opt) {
  if (prompt.empty()) throw ContractError("generate: prompt must tokenize to at least one token");
  std::vector<int> ctx(prompt.begin(), prompt.end());
  std::vector<int> fresh;
  Rng rng(opt.rng_seed);
  for (int step = 0; step < opt.max_new_tokens; ++step) {
    if (static_cast<int>(ctx.size()) >= ckpt.config.max_context) break;
    const TensorT<S> logits = forward(ckpt, std::span<const int>(ctx));
    const auto row = logits.mat().row(static_cast<int>(ctx.size()) - 1);
    int next = 0;
    if (opt.temperature <= 0.0f) {
      // Greedy; ties resolve to the lowest token id.
      S best = row[0];
      for (int t = 1; t < ckpt.config.vocab_size; ++t) {
        if (row[t] > best) {
          best = row[t];
          next = t;
        }
      }
    } else {
      const S m = row.maxCoeff();
      Eigen::Array<double, Eigen::Dynamic, 1> p =
          ((row.array() - m) / static_cast<S>(opt.temperature)).template cast<double>().exp();
      p /= p.sum();
      const double u = rng.next_unit();
      double acc = 0.0;
      next = ckpt.config.vocab_size - 1;
      for (int t = 0; t < ckpt.config.vocab_size; ++t) {
        acc += p[t];
        if (u < acc) {
          next = t;
          break;
        }
      }
    }
    if (next == Vocab::kEos) break;
    fresh.push_back(next);
    ctx.push_back(next);
  }
  return fresh;
}

/// Text-level generation: tokenizes the prompt against the checkpoint vocab
/// and returns the detokenized completion.
inline std::string generate(const LMCheckpoint& ckpt, const std::string& prompt,
                            const GenerateOptions& opt) {
  const Vocab vocab = Vocab::from_tokens(ckpt.vocab);
  const std::vector<int> ids = tokenize(prompt, vocab);
  const std::vector<int> out = generate_tokens(ckpt, std::span<const int>(ids), opt);
  return detokenize(out, vocab);
}

}  // namespace mededit
