// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only transformer with parallel attention/FFN blocks, RMS pre-norm,
// rotary positions, SwiGLU FFNs and a tied LM head. No biases anywhere.

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nexus/error.hpp"
#include "nexus/ops.hpp"
#include "nexus/tensor.hpp"
#include "nexus/text_data.hpp"

namespace nexus {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ffn = 128;
  std::size_t vocab_size = kVocabSize;
  std::size_t max_seq_len = 128;
  bool parallel_attention = true;
  bool use_biases = false;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;

  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_ffn == 0 || vocab_size == 0 ||
        max_seq_len == 0) {
      throw ValidationError("model config: all dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
      throw ValidationError("model config: d_model " + std::to_string(d_model) +
                            " not divisible by n_heads " + std::to_string(n_heads));
    }
    if (head_dim() % 2 != 0) throw ValidationError("model config: head_dim must be even for rotary");
    if (!parallel_attention) throw ValidationError("model config: only parallel attention blocks are supported");
    if (use_biases) throw ValidationError("model config: dense layers carry no biases");
    if (vocab_size < kVocabSize) throw ValidationError("model config: vocab_size must cover the byte vocabulary");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},       {"d_model", c.d_model},
                     {"n_heads", c.n_heads},         {"d_ffn", c.d_ffn},
                     {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
                     {"parallel_attention", c.parallel_attention},
                     {"use_biases", c.use_biases},   {"rope_base", c.rope_base},
                     {"norm_eps", c.norm_eps}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_ffn = j.value("d_ffn", d.d_ffn);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.parallel_attention = j.value("parallel_attention", d.parallel_attention);
  c.use_biases = j.value("use_biases", d.use_biases);
  c.rope_base = j.value("rope_base", d.rope_base);
  c.norm_eps = j.value("norm_eps", d.norm_eps);
}

/// Names of fields that differ between two configs.
inline std::vector<std::string> config_diff(const ModelConfig& a, const ModelConfig& b) {
  std::vector<std::string> out;
  nlohmann::json ja = a, jb = b;
  for (auto it = ja.begin(); it != ja.end(); ++it)
    if (jb[it.key()] != it.value()) out.push_back(it.key());
  return out;
}

/// SwiGLU feed-forward network: down(swiglu(x @ up)).
template <std::floating_point T>
struct ExpertFFN {
  Tensor<T> up;    // [h, 2*d_ffn]
  Tensor<T> down;  // [d_ffn, h]

  static ExpertFFN init(std::size_t h, std::size_t d_ffn, std::size_t n_layers, Rng& rng) {
    ExpertFFN f;
    f.up = Tensor<T>::randn({h, 2 * d_ffn}, T(1.0 / std::sqrt(double(h))), rng, true);
    f.down = Tensor<T>::randn({d_ffn, h}, T(1.0 / std::sqrt(double(d_ffn) * 2.0 * double(n_layers))), rng, true);
    return f;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return matmul(swiglu(matmul(x, up)), down); }

  ExpertFFN clone() const { return {up.clone(), down.clone()}; }

  bool bit_equal(const ExpertFFN& o) const { return up.bit_equal(o.up) && down.bit_equal(o.down); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".up", up);
    f(prefix + ".down", down);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".up", up);
    f(prefix + ".down", down);
  }
};

template <std::floating_point T>
struct AttentionState {
  Tensor<T> wq, wk, wv, wo;  // each [h, h]

  static AttentionState init(std::size_t h, std::size_t n_layers, Rng& rng) {
    const T s = T(1.0 / std::sqrt(double(h)));
    AttentionState a;
    a.wq = Tensor<T>::randn({h, h}, s, rng, true);
    a.wk = Tensor<T>::randn({h, h}, s, rng, true);
    a.wv = Tensor<T>::randn({h, h}, s, rng, true);
    a.wo = Tensor<T>::randn({h, h}, T(s / std::sqrt(2.0 * double(n_layers))), rng, true);
    return a;
  }

  AttentionState clone() const { return {wq.clone(), wk.clone(), wv.clone(), wo.clone()}; }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + ".wq", self.wq);
    f(prefix + ".wk", self.wk);
    f(prefix + ".wv", self.wv);
    f(prefix + ".wo", self.wo);
  }
};

template <std::floating_point T>
Tensor<T> attention_forward(const AttentionState<T>& attn, const Tensor<T>& xn,
                            const ModelConfig& cfg) {
  auto q = rotary(matmul(xn, attn.wq), cfg.n_heads, cfg.rope_base);
  auto k = rotary(matmul(xn, attn.wk), cfg.n_heads, cfg.rope_base);
  auto v = matmul(xn, attn.wv);
  return matmul(causal_attention(q, k, v, cfg.n_heads), attn.wo);
}

template <std::floating_point T>
struct DenseBlock {
  Tensor<T> norm;  // [h]
  AttentionState<T> attn;
  ExpertFFN<T> ffn;
};

/// Full parameter set of a dense decoder. `domain` names the training domain
/// of an expert and is empty for a seed model.
template <std::floating_point T>
struct DenseModelState {
  ModelConfig config;
  std::string domain;
  Tensor<T> tok_embeddings;  // [vocab, h], tied with the LM head
  std::vector<DenseBlock<T>> blocks;
  Tensor<T> final_norm;  // [h]

  static DenseModelState init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    DenseModelState m;
    m.config = cfg;
    const std::size_t h = cfg.d_model;
    m.tok_embeddings = Tensor<T>::randn({cfg.vocab_size, h}, T(1.0 / std::sqrt(double(h))), rng, true);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      DenseBlock<T> b;
      b.norm = Tensor<T>::ones({h}, true);
      b.attn = AttentionState<T>::init(h, cfg.n_layers, rng);
      b.ffn = ExpertFFN<T>::init(h, cfg.d_ffn, cfg.n_layers, rng);
      m.blocks.push_back(std::move(b));
    }
    m.final_norm = Tensor<T>::ones({h}, true);
    return m;
  }

  DenseModelState clone() const {
    DenseModelState m;
    m.config = config;
    m.domain = domain;
    m.tok_embeddings = tok_embeddings.clone();
    for (const auto& b : blocks) m.blocks.push_back({b.norm.clone(), b.attn.clone(), b.ffn.clone()});
    m.final_norm = final_norm.clone();
    return m;
  }

  /// Calls f(name, tensor) for every parameter in a fixed order.
  template <class F>
  void for_each_parameter(F&& f) { visit(*this, f); }
  template <class F>
  void for_each_parameter(F&& f) const { visit(*this, f); }

 private:
  template <class Self, class F>
  static void visit(Self& self, F& f) {
    f(std::string("tok_embeddings"), self.tok_embeddings);
    for (std::size_t l = 0; l < self.blocks.size(); ++l) {
      auto& b = self.blocks[l];
      const std::string p = "blocks." + std::to_string(l);
      f(p + ".norm", b.norm);
      AttentionState<T>::visit(b.attn, p + ".attn", f);
      b.ffn.visit(p + ".ffn", f);
    }
    f(std::string("final_norm"), self.final_norm);
  }
};

/// Shared trunk: embeddings -> blocks (x + attn(norm x) + ffn(norm x)) ->
/// final norm -> tied head. `ffn(layer, block, xn)` supplies the FFN branch.
template <std::floating_point T, class Block, class FfnFn>
Tensor<T> decoder_forward(const ModelConfig& cfg, const Tensor<T>& tok_embeddings,
                          std::span<const Block> blocks, const Tensor<T>& final_norm,
                          std::span<const TokenId> ids, std::size_t batch, std::size_t seq_len,
                          FfnFn&& ffn) {
  if (seq_len > cfg.max_seq_len) {
    throw ArgumentError("sequence length " + std::to_string(seq_len) + " exceeds max_seq_len " +
                        std::to_string(cfg.max_seq_len));
  }
  if (ids.size() != batch * seq_len) throw ShapeError("token ids do not match [batch, seq_len]");
  const T eps = static_cast<T>(cfg.norm_eps);
  Tensor<T> x = embedding(tok_embeddings, ids, Shape{batch, seq_len});
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& b = blocks[l];
    Tensor<T> xn = rms_norm(x, b.norm, eps);
    Tensor<T> attn = attention_forward(b.attn, xn, cfg);
    Tensor<T> f = ffn(l, b, xn);
    x = add(add(x, attn), f);
  }
  return matmul_transposed(rms_norm(x, final_norm, eps), tok_embeddings);
}

/// Logits [batch, seq, vocab].
template <std::floating_point T>
Tensor<T> forward(const DenseModelState<T>& model, std::span<const TokenId> ids, std::size_t batch,
                  std::size_t seq_len) {
  return decoder_forward<T, DenseBlock<T>>(
      model.config, model.tok_embeddings, std::span<const DenseBlock<T>>(model.blocks),
      model.final_norm, ids, batch, seq_len,
      [](std::size_t, const DenseBlock<T>& b, const Tensor<T>& xn) { return b.ffn(xn); });
}

template <std::floating_point T>
Tensor<T> forward(const DenseModelState<T>& model, const Batch& batch) {
  return forward(model, std::span<const TokenId>(batch.token_ids), batch.batch, batch.seq_len);
}

/// Mean next-token NLL over non-PAD targets.
template <std::floating_point T>
Tensor<T> cross_entropy_loss(const Tensor<T>& logits, std::span<const TokenId> targets) {
  return cross_entropy(logits, targets, kPad);
}

}  // namespace nexus
