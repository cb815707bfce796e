// SPDX-License-Identifier: Apache-2.0
#include "mededit/editor.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace mededit {

namespace {

using nlohmann::json;

std::string base64_encode(const std::uint8_t* data, std::size_t len) {
  static const char* kAlphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((len + 2) / 3 * 4);
  for (std::size_t i = 0; i < len; i += 3) {
    std::uint32_t chunk = std::uint32_t(data[i]) << 16;
    if (i + 1 < len) chunk |= std::uint32_t(data[i + 1]) << 8;
    if (i + 2 < len) chunk |= std::uint32_t(data[i + 2]);
    out.push_back(kAlphabet[(chunk >> 18) & 63]);
    out.push_back(kAlphabet[(chunk >> 12) & 63]);
    out.push_back(i + 1 < len ? kAlphabet[(chunk >> 6) & 63] : '=');
    out.push_back(i + 2 < len ? kAlphabet[chunk & 63] : '=');
  }
  return out;
}

std::string tensor_b64(const Tensor& t) {
  return base64_encode(reinterpret_cast<const std::uint8_t*>(t.data()),
                       static_cast<std::size_t>(t.numel()) * sizeof(float));
}

/// Last contiguous occurrence of `needle` in `haystack`; -1 if absent.
int find_last_subsequence(std::span<const int> haystack, std::span<const int> needle) {
  if (needle.empty() || needle.size() > haystack.size()) return -1;
  for (int start = static_cast<int>(haystack.size() - needle.size()); start >= 0; --start) {
    bool match = true;
    for (std::size_t j = 0; j < needle.size(); ++j) {
      if (haystack[static_cast<std::size_t>(start) + j] != needle[j]) {
        match = false;
        break;
      }
    }
    if (match) return start;
  }
  return -1;
}

double target_logprob(const LMCheckpoint& ckpt, const FactEntry& entry, const std::string& target) {
  const Vocab vocab = Vocab::from_tokens(ckpt.vocab);
  const std::vector<int> prompt = tokenize(entry.prompt, vocab);
  const std::vector<int> completion = tokenize(target, vocab);
  return sequence_logprob(ckpt, std::span<const int>(prompt), std::span<const int>(completion));
}

}  // namespace

KeyCovariance KeyCovariance::from_matrix(int layer, Tensor c, float reg, std::int64_t samples) {
  if (c.ndim() != 2 || c.rows() != c.cols()) {
    throw ShapeError("covariance must be square, got " + shape_str(c.shape()));
  }
  KeyCovariance cov;
  cov.layer = layer;
  cov.sample_count = samples;
  cov.reg = reg;
  cov.llt = std::make_shared<Eigen::LLT<Eigen::MatrixXd>>(c.mat().cast<double>());
  if (cov.llt->info() != Eigen::Success) {
    throw NumericError("covariance Cholesky factorization failed; increase the regularization");
  }
  cov.c = std::move(c);
  return cov;
}

KeyCovariance estimate_covariance(const LMCheckpoint& ckpt, int layer,
                                  std::span<const std::string> reference_corpus, float reg) {
  ckpt.validate();
  if (layer < 0 || layer >= ckpt.config.n_layers) {
    throw ContractError("estimate_covariance: layer " + std::to_string(layer) + " out of range");
  }
  if (reference_corpus.size() < 100) {
    throw ContractError("estimate_covariance: reference corpus must have >= 100 lines, got " +
                        std::to_string(reference_corpus.size()));
  }
  const Vocab vocab = Vocab::from_tokens(ckpt.vocab);
  const int d_mlp = ckpt.config.d_mlp;
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(d_mlp, d_mlp);
  std::int64_t count = 0;

  constexpr int kBatchLines = 64;
  std::vector<std::vector<int>> pending;
  const auto flush = [&]() {
    if (pending.empty()) return;
    int seq_len = 0;
    for (const auto& toks : pending) seq_len = std::max(seq_len, static_cast<int>(toks.size()));
    std::vector<int> batch;
    batch.reserve(pending.size() * static_cast<std::size_t>(seq_len));
    for (const auto& toks : pending) {
      for (int j = 0; j < seq_len; ++j) {
        batch.push_back(j < static_cast<int>(toks.size()) ? toks[static_cast<std::size_t>(j)] : Vocab::kPad);
      }
    }
    GraphT<float> g;
    ForwardTrace trace;
    forward_graph<float>(g, ckpt, batch, seq_len, nullptr, nullptr, &trace);
    const Tensor& keys = trace.layers[static_cast<std::size_t>(layer)].keys;
    // Only real token rows contribute; padding rows are skipped.
    std::vector<int> valid;
    for (std::size_t li = 0; li < pending.size(); ++li) {
      for (std::size_t j = 0; j < pending[li].size(); ++j) {
        valid.push_back(static_cast<int>(li) * seq_len + static_cast<int>(j));
      }
    }
    Eigen::MatrixXd rows(valid.size(), d_mlp);
    for (std::size_t r = 0; r < valid.size(); ++r) {
      rows.row(static_cast<Eigen::Index>(r)) = keys.mat().row(valid[r]).cast<double>();
    }
    acc.noalias() += rows.transpose() * rows;
    count += static_cast<std::int64_t>(valid.size());
    pending.clear();
  };

  for (const auto& line : reference_corpus) {
    std::vector<int> toks = tokenize(line, vocab);
    if (toks.empty()) continue;
    if (static_cast<int>(toks.size()) > ckpt.config.max_context) {
      toks.resize(static_cast<std::size_t>(ckpt.config.max_context));
    }
    pending.push_back(std::move(toks));
    if (static_cast<int>(pending.size()) >= kBatchLines) flush();
  }
  flush();
  if (count == 0) throw ContractError("estimate_covariance: reference corpus produced no tokens");

  Eigen::MatrixXd c = acc / static_cast<double>(count);
  const double ridge = static_cast<double>(reg) * c.trace() / static_cast<double>(d_mlp);
  c.diagonal().array() += ridge;

  KeyCovariance cov;
  cov.layer = layer;
  cov.sample_count = count;
  cov.reg = reg;
  cov.c = Tensor({d_mlp, d_mlp});
  cov.c.mat() = c.cast<float>();
  // Factor the double-precision matrix, not its float32 rounding.
  cov.llt = std::make_shared<Eigen::LLT<Eigen::MatrixXd>>(c);
  if (cov.llt->info() != Eigen::Success) {
    throw NumericError("covariance Cholesky factorization failed; increase the regularization");
  }
  return cov;
}

KeyResult compute_key(const LMCheckpoint& ckpt, int layer, const FactEntry& entry) {
  if (layer < 0 || layer >= ckpt.config.n_layers) {
    throw ContractError("compute_key: layer " + std::to_string(layer) + " out of range");
  }
  const Vocab vocab = Vocab::from_tokens(ckpt.vocab);
  KeyResult out;
  out.prompt_tokens = tokenize(entry.prompt, vocab);
  const std::vector<int> subject = tokenize(entry.subject, vocab);
  const int start = find_last_subsequence(out.prompt_tokens, subject);
  if (start < 0 || subject.empty()) {
    throw ContractError("compute_key: subject '" + entry.subject +
                        "' does not align with the tokenized prompt (case_id " +
                        std::to_string(entry.case_id) + ")");
  }
  out.position = start + static_cast<int>(subject.size()) - 1;
  ForwardTrace trace;
  forward(ckpt, std::span<const int>(out.prompt_tokens), &trace);
  const Tensor& keys = trace.layers[static_cast<std::size_t>(layer)].keys;
  out.key = Tensor({ckpt.config.d_mlp});
  out.key.vec() = keys.mat().row(out.position);
  return out;
}

ValueOptResult optimize_value(const LMCheckpoint& ckpt, int layer, const FactEntry& entry,
                              const EditHyper& hyper) {
  const Vocab vocab = Vocab::from_tokens(ckpt.vocab);
  const KeyResult key = compute_key(ckpt, layer, entry);
  const std::vector<int> adv = tokenize(entry.target_adversarial, vocab);
  if (adv.empty()) throw ContractError("optimize_value: adversarial target tokenizes to nothing");

  std::vector<int> full = key.prompt_tokens;
  full.insert(full.end(), adv.begin(), adv.end());
  const int prompt_len = static_cast<int>(key.prompt_tokens.size());
  std::vector<std::pair<int, int>> picks;
  for (std::size_t i = 0; i < adv.size(); ++i) {
    picks.emplace_back(prompt_len - 1 + static_cast<int>(i), adv[i]);
  }

  const int d_model = ckpt.config.d_model;
  ValueOptResult result;
  result.key_position = key.position;

  // Baseline value and log-prob with delta = 0.
  {
    ForwardTrace trace;
    forward(ckpt, std::span<const int>(full), &trace);
    result.v_base = Tensor({d_model});
    result.v_base.vec() = trace.layers[static_cast<std::size_t>(layer)].values.mat().row(key.position);
  }

  Tensor delta({d_model});
  const double v_norm = l2_norm(result.v_base);
  const double cap = static_cast<double>(hyper.norm_cap_factor) * v_norm;

  Tensor best_delta = delta;
  double best_loss = -std::numeric_limits<double>::infinity();

  const auto evaluate = [&](bool want_grad, Tensor* grad_out) -> double {
    Graph g;
    const NodeId delta_node = g.input(delta);
    const ValueInjection inject{layer, key.position, delta_node};
    const NodeId logits = forward_graph<float>(g, ckpt, full, static_cast<int>(full.size()), nullptr,
                                               &inject);
    const NodeId obj = token_logprob_sum(g, logits, picks);
    const double value = static_cast<double>(g.value(obj)[0]);
    if (want_grad) {
      g.backward(obj);
      *grad_out = g.grad(delta_node);
    }
    return value;
  };

  double current = evaluate(false, nullptr);
  result.loss_trace.push_back(static_cast<float>(current));
  if (current > best_loss) {
    best_loss = current;
    best_delta = delta;
  }

  for (int step = 0; step < hyper.opt_steps; ++step) {
    Tensor grad({d_model});
    current = evaluate(true, &grad);
    if (!std::isfinite(current)) {
      throw NumericError("optimize_value: non-finite objective at step " + std::to_string(step));
    }
    delta.vec() += hyper.opt_lr * grad.vec();
    const double norm = l2_norm(delta);
    if (norm > cap && norm > 0.0) {
      delta.vec() *= static_cast<float>(cap / norm);
    }
    const double after = evaluate(false, nullptr);
    if (!std::isfinite(after)) {
      throw NumericError("optimize_value: non-finite objective at step " + std::to_string(step));
    }
    result.loss_trace.push_back(static_cast<float>(after));
    if (after > best_loss) {
      best_loss = after;
      best_delta = delta;
    }
  }

  if (hyper.opt_steps > 0 && best_loss <= static_cast<double>(result.loss_trace.front())) {
    throw NumericError("optimize_value: gradient ascent failed to improve the target log-prob (case_id " +
                       std::to_string(entry.case_id) + ")");
  }

  result.v_adv = result.v_base;
  result.v_adv.vec() += best_delta.vec();
  result.delta_norm = l2_norm(best_delta);
  return result;
}

RankOneResult rank_one_update(const Tensor& w_proj, const Tensor& key, const Tensor& v_adv,
                              const KeyCovariance& cov) {
  if (w_proj.ndim() != 2) throw ShapeError("rank_one_update: W must be 2-D");
  const int d_out = w_proj.rows(), d_in = w_proj.cols();
  if (key.numel() != d_in) {
    throw ShapeError("rank_one_update: key length " + shape_str(key.shape()) + " does not match W " +
                     shape_str(w_proj.shape()));
  }
  if (v_adv.numel() != d_out) {
    throw ShapeError("rank_one_update: value length " + shape_str(v_adv.shape()) + " does not match W " +
                     shape_str(w_proj.shape()));
  }
  if (!cov.llt || cov.c.rows() != d_in) {
    throw ShapeError("rank_one_update: covariance does not match W columns");
  }
  const Eigen::VectorXd k = key.vec().cast<double>();
  if (k.norm() == 0.0) throw NumericError("rank_one_update: degenerate zero key");
  const Eigen::VectorXd y = cov.llt->solve(k);  // C^-1 k
  const double denom = y.dot(k);
  if (!(std::abs(denom) > 0.0) || !std::isfinite(denom)) {
    throw NumericError("rank_one_update: (C^-1 k)^T k vanished; covariance is ill-conditioned");
  }
  const Eigen::MatrixXd wd = w_proj.mat().cast<double>();
  const Eigen::VectorXd residual = v_adv.vec().cast<double>() - wd * k;
  const Eigen::VectorXd u = residual / denom;

  RankOneResult out;
  out.w_star = Tensor({d_out, d_in});
  out.w_star.mat() = (wd + u * y.transpose()).cast<float>();
  out.u = Tensor({d_out});
  out.u.vec() = u.cast<float>();
  out.w = Tensor({d_in});
  out.w.vec() = y.cast<float>();
  return out;
}

std::pair<LMCheckpoint, EditReport> apply_edit(const LMCheckpoint& ckpt, const EditRequest& req,
                                               const KeyCovariance& cov) {
  ckpt.validate();
  req.validate(ckpt.config);
  if (cov.layer != req.layer) {
    throw ContractError("apply_edit: covariance was estimated for layer " + std::to_string(cov.layer) +
                        ", request targets layer " + std::to_string(req.layer));
  }

  EditReport report;
  report.case_id = req.entry.case_id;
  report.layer = req.layer;
  report.hyper = req.hyper;
  report.pre_logprob_adv = target_logprob(ckpt, req.entry, req.entry.target_adversarial);
  report.pre_logprob_orig = target_logprob(ckpt, req.entry, req.entry.target_original);

  const KeyResult key = compute_key(ckpt, req.layer, req.entry);
  ValueOptResult opt = optimize_value(ckpt, req.layer, req.entry, req.hyper);
  const std::string w_name = "block" + std::to_string(req.layer) + ".W_proj";
  RankOneResult update = rank_one_update(ckpt.tensor(w_name), key.key, opt.v_adv, cov);

  LMCheckpoint edited = ckpt;
  edited.tensor(w_name) = update.w_star;

  report.key_position = key.position;
  report.key = key.key;
  report.v_adv = std::move(opt.v_adv);
  report.delta_u = std::move(update.u);
  report.delta_w = std::move(update.w);
  report.loss_trace = std::move(opt.loss_trace);
  report.delta_norm = opt.delta_norm;
  report.edited_fraction = static_cast<double>(ckpt.tensor(w_name).numel()) /
                           static_cast<double>(ckpt.total_params());
  report.post_logprob_adv = target_logprob(edited, req.entry, req.entry.target_adversarial);
  report.post_logprob_orig = target_logprob(edited, req.entry, req.entry.target_original);
  if (!(report.post_logprob_adv > report.pre_logprob_adv)) {
    throw NumericError("apply_edit: adversarial log-prob did not increase for case_id " +
                       std::to_string(req.entry.case_id));
  }
  return {std::move(edited), std::move(report)};
}

std::string edit_report_to_json(const EditReport& report) {
  json j{{"case_id", report.case_id},
         {"layer", report.layer},
         {"key_position", report.key_position},
         {"hyper",
          {{"opt_steps", report.hyper.opt_steps},
           {"opt_lr", report.hyper.opt_lr},
           {"norm_cap_factor", report.hyper.norm_cap_factor},
           {"cov_reg", report.hyper.cov_reg}}},
         {"delta_l2_norm", report.delta_norm},
         {"edited_fraction", report.edited_fraction},
         {"pre_logprob_adv", report.pre_logprob_adv},
         {"post_logprob_adv", report.post_logprob_adv},
         {"pre_logprob_orig", report.pre_logprob_orig},
         {"post_logprob_orig", report.post_logprob_orig},
         {"loss_trace", report.loss_trace},
         {"key_b64", tensor_b64(report.key)},
         {"v_adv_b64", tensor_b64(report.v_adv)},
         {"delta_u_b64", tensor_b64(report.delta_u)},
         {"delta_w_b64", tensor_b64(report.delta_w)}};
  return j.dump(2) + "\n";
}

}  // namespace mededit
