#pragma once

// Toy decoder-only transformer (pre-norm attention + SwiGLU FFN) with
// attention-free condition injection: before layer l, every position's
// hidden state receives  condition * g[l],  where the per-layer gates start
// at exactly zero.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bindllm/bind_network.hpp"
#include "bindllm/peft.hpp"
#include "bindllm/tokenizer.hpp"

namespace bindllm {

struct LMConfig {
  std::size_t vocab_size = 512;
  std::size_t dim = 128;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t max_seq = 128;
  std::size_t ffn_hidden = 256;
  bool rope = true;
  double rope_base = 10000.0;
  bool shared_gate = false;

  void validate() const {
    if (!vocab_size || !dim || !layers || !heads || !max_seq || !ffn_hidden) {
      throw ConfigError("LM config values must all be positive");
    }
    if (dim % heads != 0) throw ConfigError("LM width must be divisible by the head count");
    if (rope && (dim / heads) % 2 != 0) throw ConfigError("rotary positions need an even head width");
  }
};

inline nlohmann::json to_json(const LMConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"dim", c.dim},         {"layers", c.layers},
          {"heads", c.heads},           {"max_seq", c.max_seq}, {"ffn_hidden", c.ffn_hidden},
          {"rope", c.rope},             {"rope_base", c.rope_base}, {"shared_gate", c.shared_gate}};
}

inline LMConfig lm_config_from_json(const nlohmann::json& j) {
  LMConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.dim = j.at("dim").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.max_seq = j.at("max_seq").get<std::size_t>();
  c.ffn_hidden = j.at("ffn_hidden").get<std::size_t>();
  c.rope = j.at("rope").get<bool>();
  c.rope_base = j.at("rope_base").get<double>();
  c.shared_gate = j.at("shared_gate").get<bool>();
  c.validate();
  return c;
}

struct TransformerLayer {
  Parameter attn_norm;
  Linear wq, wk, wv, wo;
  Parameter ffn_norm;
  Linear up, gate, down;

  std::vector<Linear*> linears() { return {&wq, &wk, &wv, &wo, &up, &gate, &down}; }
};

class InjectedLM {
 public:
  InjectedLM() = default;

  static InjectedLM init(const LMConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    CounterRng rng = CounterRng(seed).fork(0x1a4);
    InjectedLM lm;
    lm.cfg_ = cfg;
    const std::size_t c = cfg.dim;
    lm.tok_emb_ = Parameter("lm.tok_emb", ParamGroup::base_lm,
                            Tensor::normal(cfg.vocab_size, c, 1.0 / std::sqrt(double(c)), rng));
    if (!cfg.rope) {
      lm.pos_emb_ = Parameter("lm.pos_emb", ParamGroup::base_lm,
                              Tensor::normal(cfg.max_seq, c, 0.1 / std::sqrt(double(c)), rng));
    }
    // Residual-branch outputs start small so the untrained stack is near identity.
    const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.layers));
    lm.layers_.resize(cfg.layers);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string p = "lm.layer" + std::to_string(l) + ".";
      auto& L = lm.layers_[l];
      L.attn_norm = Parameter(p + "attn_norm", ParamGroup::bias_norm, Tensor::filled(1, c, 1.0), false);
      L.wq = Linear(p + "wq", c, c, rng);
      L.wk = Linear(p + "wk", c, c, rng);
      L.wv = Linear(p + "wv", c, c, rng);
      L.wo = Linear(p + "wo", c, c, rng, out_scale);
      L.ffn_norm = Parameter(p + "ffn_norm", ParamGroup::bias_norm, Tensor::filled(1, c, 1.0), false);
      L.up = Linear(p + "up", c, cfg.ffn_hidden, rng);
      L.gate = Linear(p + "gate", c, cfg.ffn_hidden, rng);
      L.down = Linear(p + "down", cfg.ffn_hidden, c, rng, out_scale);
    }
    lm.final_norm_ = Parameter("lm.final_norm", ParamGroup::bias_norm, Tensor::filled(1, c, 1.0), false);
    // Zero head: the untrained model predicts the uniform distribution.
    lm.head_ = Parameter("lm.head", ParamGroup::base_lm, Tensor::zeros(c, cfg.vocab_size));
    lm.gates_ = Parameter("lm.gates", ParamGroup::gates,
                          Tensor::zeros(1, cfg.shared_gate ? 1 : cfg.layers), /*decays=*/false);
    return lm;
  }

  const LMConfig& config() const noexcept { return cfg_; }
  Parameter& gates() noexcept { return gates_; }
  const Parameter& gates() const noexcept { return gates_; }
  Parameter& head() noexcept { return head_; }
  Parameter& token_embedding() noexcept { return tok_emb_; }
  TransformerLayer& layer(std::size_t l) { return layers_.at(l); }
  const TransformerLayer& layer(std::size_t l) const { return layers_.at(l); }
  std::size_t gate_index(std::size_t layer) const { return cfg_.shared_gate ? 0 : layer; }

  bool has_lora() const { return !layers_.empty() && layers_.front().wq.lora().has_value(); }

  void attach_lora(std::size_t rank, std::uint64_t seed) {
    CounterRng rng = CounterRng(seed).fork(0x10a);
    for (auto& L : layers_)
      for (Linear* lin : L.linears()) lin->attach_lora(rank, rng);
  }

  void merge_lora() {
    for (auto& L : layers_)
      for (Linear* lin : L.linears()) lin->merge_lora();
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps{&tok_emb_};
    if (!cfg_.rope) ps.push_back(&pos_emb_);
    for (auto& L : layers_) {
      ps.push_back(&L.attn_norm);
      ps.push_back(&L.ffn_norm);
      for (Linear* lin : L.linears()) {
        auto lp = lin->parameters();
        ps.insert(ps.end(), lp.begin(), lp.end());
      }
    }
    ps.insert(ps.end(), {&final_norm_, &head_, &gates_});
    return ps;
  }

  void check_tokens(std::span<const int> tokens) const {
    if (tokens.empty()) throw EmptyBatchError("lm_forward: empty token sequence");
    if (tokens.size() > cfg_.max_seq) {
      throw TruncationError("sequence of " + std::to_string(tokens.size()) +
                            " tokens exceeds max_seq " + std::to_string(cfg_.max_seq));
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= cfg_.vocab_size) {
        throw VocabularyError("token id " + std::to_string(tokens[i]) + " at position " +
                              std::to_string(i) + " outside vocabulary of size " +
                              std::to_string(cfg_.vocab_size));
      }
    }
  }

  // Logits [T x V]. `condition` is a [1 x C] row (T_I) or absent.
  Var forward(Tape& tape, std::span<const int> tokens, std::optional<Var> condition) {
    check_tokens(tokens);
    if (condition && condition->value().size() != cfg_.dim) {
      throw DimensionError("lm_forward: condition " + shape_str(condition->value().shape()) +
                           " does not match model width " + std::to_string(cfg_.dim));
    }
    Var x = ops::embedding(tape.param(tok_emb_), tokens);
    if (!cfg_.rope) {
      std::vector<int> pos(tokens.size());
      std::iota(pos.begin(), pos.end(), 0);
      x = ops::add(x, ops::embedding(tape.param(pos_emb_), pos));
    }
    Var gates = tape.param(gates_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      auto& L = layers_[l];
      if (condition) x = ops::inject(x, *condition, gates, gate_index(l));
      Var h = ops::rmsnorm(x, tape.param(L.attn_norm), kNormEps);
      Var q = L.wq.forward(tape, h);
      Var k = L.wk.forward(tape, h);
      Var v = L.wv.forward(tape, h);
      if (cfg_.rope) {
        q = ops::rope(q, cfg_.heads, cfg_.rope_base);
        k = ops::rope(k, cfg_.heads, cfg_.rope_base);
      }
      x = ops::add(x, L.wo.forward(tape, ops::causal_attention(q, k, v, cfg_.heads)));
      h = ops::rmsnorm(x, tape.param(L.ffn_norm), kNormEps);
      Var act = ops::mul(L.up.forward(tape, h), ops::silu(L.gate.forward(tape, h)));
      x = ops::add(x, L.down.forward(tape, act));
    }
    x = ops::rmsnorm(x, tape.param(final_norm_), kNormEps);
    return ops::matmul(x, tape.param(head_));
  }

  Tensor logits(std::span<const int> tokens, const Tensor* condition = nullptr) {
    Tape tape;
    std::optional<Var> c;
    if (condition) c = tape.constant(*condition);
    return forward(tape, tokens, c).value();
  }

  class Decoder;

 private:
  LMConfig cfg_;
  Parameter tok_emb_;
  Parameter pos_emb_;
  std::vector<TransformerLayer> layers_;
  Parameter final_norm_;
  Parameter head_;
  Parameter gates_;
};

// Incremental decoding with a per-call key/value cache. Each step evaluates
// one new position with the same kernels, in the same order, as the
// full-sequence forward, so step logits equal the matching forward rows.
class InjectedLM::Decoder {
 public:
  Decoder(const InjectedLM& lm, std::optional<Tensor> condition)
      : lm_(lm), cond_(std::move(condition)) {
    const auto& c = lm.cfg_;
    if (cond_ && cond_->size() != c.dim) {
      throw DimensionError("decoder: condition width does not match model width");
    }
    keys_.assign(c.layers, Tensor::zeros(c.max_seq, c.dim));
    values_.assign(c.layers, Tensor::zeros(c.max_seq, c.dim));
  }

  std::size_t position() const noexcept { return pos_; }

  // Feeds one token; returns the logits row predicting the next token.
  Tensor step(int token) {
    const auto& c = lm_.cfg_;
    if (pos_ >= c.max_seq) {
      throw TruncationError("decoding past max_seq " + std::to_string(c.max_seq));
    }
    if (token < 0 || static_cast<std::size_t>(token) >= c.vocab_size) {
      throw VocabularyError("token id " + std::to_string(token) + " outside vocabulary");
    }
    Tensor x = Tensor::zeros(1, c.dim);
    auto src = lm_.tok_emb_.value.row_span(static_cast<std::size_t>(token));
    std::copy(src.begin(), src.end(), x.storage().begin());
    if (!c.rope) {
      auto p = lm_.pos_emb_.value.row_span(pos_);
      for (std::size_t j = 0; j < c.dim; ++j) x[j] += p[j];
    }
    for (std::size_t l = 0; l < c.layers; ++l) {
      const auto& L = lm_.layers_[l];
      if (cond_) {
        const double g = lm_.gates_.value[lm_.gate_index(l)];
        for (std::size_t j = 0; j < c.dim; ++j) x[j] += (*cond_)[j] * g;
      }
      Tensor h = kernel::rmsnorm_rows(x, L.attn_norm.value, kNormEps);
      Tensor q = L.wq.apply(h);
      Tensor k = L.wk.apply(h);
      Tensor v = L.wv.apply(h);
      if (c.rope) {
        kernel::rope_inplace(q, c.heads, pos_, c.rope_base, 1.0);
        kernel::rope_inplace(k, c.heads, pos_, c.rope_base, 1.0);
      }
      std::copy(k.storage().begin(), k.storage().end(), keys_[l].row_span(pos_).begin());
      std::copy(v.storage().begin(), v.storage().end(), values_[l].row_span(pos_).begin());
      Tensor att = Tensor::zeros(1, c.dim);
      kernel::attend_row(q.row_span(0), keys_[l], values_[l], pos_, c.heads, att.row_span(0), nullptr);
      x += L.wo.apply(att);
      h = kernel::rmsnorm_rows(x, L.ffn_norm.value, kNormEps);
      Tensor up = L.up.apply(h);
      Tensor gt = L.gate.apply(h);
      for (std::size_t i = 0; i < up.size(); ++i) up[i] *= kernel::silu(gt[i]);
      x += L.down.apply(up);
    }
    ++pos_;
    Tensor n = kernel::rmsnorm_rows(x, lm_.final_norm_.value, kNormEps);
    return kernel::matmul(n, lm_.head_.value);
  }

 private:
  const InjectedLM& lm_;
  std::optional<Tensor> cond_;
  std::vector<Tensor> keys_, values_;
  std::size_t pos_ = 0;
};

// Caption / response objective: cross-entropy on target tokens only, the
// prompt positions are masked. The condition is bind(embedding) unless the
// embedding is absent.
inline Var caption_loss(Tape& tape, InjectedLM& lm, BindNetwork* bind, const JointEmbedding* embedding,
                        std::span<const int> prompt, std::span<const int> target) {
  if (target.empty()) throw EmptyBatchError("caption_loss: empty target");
  std::vector<int> seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), target.begin(), target.end());
  std::vector<int> inputs(seq.begin(), seq.end() - 1);
  std::vector<int> labels(inputs.size(), ops::kIgnoreIndex);
  for (std::size_t i = 0; i < inputs.size(); ++i)
    if (i + 1 >= prompt.size()) labels[i] = seq[i + 1];
  std::optional<Var> cond;
  if (bind && embedding) cond = bind->forward(tape, tape.constant(embedding->vector()));
  Var logits = lm.forward(tape, inputs, cond);
  return ops::softmax_cross_entropy(logits, labels);
}

inline double caption_loss(InjectedLM& lm, BindNetwork* bind, const JointEmbedding* embedding,
                           std::span<const int> prompt, std::span<const int> target) {
  Tape tape;
  return caption_loss(tape, lm, bind, embedding, prompt, target).value()[0];
}

struct GenerationParams {
  std::size_t max_new_tokens = 32;
  double temperature = 0.0;  // 0 = greedy
  std::size_t top_k = 0;     // 0 = no cutoff
  std::uint64_t seed = 0;
  bool stop_at_eos = true;
};

inline int pick_token(const Tensor& logits_row, const GenerationParams& p, CounterRng& rng) {
  const std::size_t v = logits_row.size();
  if (p.temperature <= 0.0) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v; ++i)
      if (logits_row[i] > logits_row[best]) best = i;
    return static_cast<int>(best);
  }
  std::vector<std::size_t> idx(v);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return logits_row[a] > logits_row[b]; });
  const std::size_t keep = (p.top_k == 0 || p.top_k > v) ? v : p.top_k;
  std::vector<double> w(keep);
  const double mx = logits_row[idx[0]];
  double z = 0.0;
  for (std::size_t i = 0; i < keep; ++i) z += (w[i] = std::exp((logits_row[idx[i]] - mx) / p.temperature));
  double u = rng.uniform() * z;
  for (std::size_t i = 0; i < keep; ++i) {
    if ((u -= w[i]) < 0.0) return static_cast<int>(idx[i]);
  }
  return static_cast<int>(idx[keep - 1]);
}

// Autoregressive decoding from `prompt`. The condition is bind(embedding)
// (or the raw `condition` row when given directly). Returns only the new tokens.
inline std::vector<int> generate_with_condition(const InjectedLM& lm, std::optional<Tensor> condition,
                                                std::span<const int> prompt, const GenerationParams& p) {
  if (prompt.empty()) throw EmptyBatchError("generate: empty prompt");
  const std::size_t max_seq = lm.config().max_seq;
  if (prompt.size() + p.max_new_tokens > max_seq) {
    throw TruncationError("generate: prompt of " + std::to_string(prompt.size()) + " tokens plus " +
                          std::to_string(p.max_new_tokens) + " new tokens exceeds max_seq " +
                          std::to_string(max_seq));
  }
  InjectedLM::Decoder dec(lm, std::move(condition));
  CounterRng rng(p.seed);
  Tensor logits;
  for (int t : prompt) logits = dec.step(t);
  std::vector<int> out;
  for (std::size_t i = 0; i < p.max_new_tokens; ++i) {
    const int next = pick_token(logits, p, rng);
    out.push_back(next);
    if (p.stop_at_eos && next == Tokenizer::kEos) break;
    if (i + 1 < p.max_new_tokens) logits = dec.step(next);
  }
  return out;
}

inline std::vector<int> generate(const InjectedLM& lm, BindNetwork* bind, const JointEmbedding* embedding,
                                 std::span<const int> prompt, const GenerationParams& p) {
  std::optional<Tensor> cond;
  if (bind && embedding) cond = bind->forward(embedding->vector());
  return generate_with_condition(lm, std::move(cond), prompt, p);
}

}  // namespace bindllm
