#pragma once

// Decoder-only causal transformer in two block styles.
//
//   Gpt2:  learned absolute positions, LayerNorm, GELU feedforward, biases.
//   Llama: RoPE inside attention, RMSNorm pre-normalisation, SwiGLU, no biases.
//
// Both use pre-normalised residual blocks h + Attn(N(h)), then + FFN(N(.)),
// a final norm and an untied output head.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "yesbound/linalg.hpp"
#include "yesbound/lm/ops.hpp"
#include "yesbound/quant.hpp"
#include "yesbound/rng.hpp"

namespace yesbound::lm {

enum class Style { Gpt2, Llama };

inline const char* to_string(Style s) { return s == Style::Gpt2 ? "gpt2" : "llama"; }

inline Style style_from_string(const std::string& s) {
  if (s == "gpt2" || s == "Gpt2Style" || s == "gpt2_style") return Style::Gpt2;
  if (s == "llama" || s == "LlamaStyle" || s == "llama_style") return Style::Llama;
  fail(ErrorKind::InvalidSpec, "unknown model style '" + s + "'");
}

struct LmConfig {
  Style style = Style::Llama;
  Index vocab_size = 256;
  Index context_len = 32;
  Index d_model = 64;
  Index n_heads = 2;
  Index d_ff = 128;
  Index n_layers = 4;
  quant::QuantSpec quant{};  // MLP, gating and head weights only
  double init_std = 0.02;

  Index d_head() const { return d_model / n_heads; }

  void validate() const {
    if (vocab_size < 1 || context_len < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 ||
        n_layers < 0) {
      fail(ErrorKind::InvalidSpec, "model dimensions must be positive");
    }
    if (d_model % n_heads != 0) fail(ErrorKind::InvalidSpec, "d_model must divide by n_heads");
    if (style == Style::Llama && d_head() % 2 != 0) {
      fail(ErrorKind::InvalidSpec, "RoPE needs an even head dimension");
    }
    quant.validate();
  }
};

struct BlockParams {
  Mat norm1_g, norm1_b, norm2_g, norm2_b;  // *_b only for LayerNorm
  Mat wq, wk, wv, wo, bq, bk, bv, bo;      // biases only for Gpt2
  Mat w_fc, b_fc, w_proj, b_proj;          // Gpt2 feedforward
  Mat w_gate, w_up, w_down;                // Llama SwiGLU

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    auto v = [&](const char* name, auto& m) {
      if (m.size() > 0) f(name, m);
    };
    v("norm1_g", self.norm1_g);
    v("norm1_b", self.norm1_b);
    v("wq", self.wq);
    v("wk", self.wk);
    v("wv", self.wv);
    v("wo", self.wo);
    v("bq", self.bq);
    v("bk", self.bk);
    v("bv", self.bv);
    v("bo", self.bo);
    v("norm2_g", self.norm2_g);
    v("norm2_b", self.norm2_b);
    v("w_fc", self.w_fc);
    v("b_fc", self.b_fc);
    v("w_proj", self.w_proj);
    v("b_proj", self.b_proj);
    v("w_gate", self.w_gate);
    v("w_up", self.w_up);
    v("w_down", self.w_down);
  }
  template <typename F>
  void for_each(F&& f) { visit(*this, f); }
  template <typename F>
  void for_each(F&& f) const { visit(*this, f); }

  /// Weights subject to quantization (MLP, gating).
  static bool quantizable(const std::string& name) {
    return name == "w_fc" || name == "w_proj" || name == "w_gate" || name == "w_up" ||
           name == "w_down";
  }
};

struct LmState {
  Mat tok_emb;  // V x d
  Mat pos_emb;  // T x d (Gpt2 only)
  std::vector<BlockParams> blocks;
  Mat normf_g, normf_b;
  Mat head;  // V x d

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    if (self.tok_emb.size() > 0) f(std::string("tok_emb"), self.tok_emb);
    if (self.pos_emb.size() > 0) f(std::string("pos_emb"), self.pos_emb);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      const std::string prefix = "blocks." + std::to_string(i) + ".";
      self.blocks[i].for_each([&](const char* name, auto& m) { f(prefix + name, m); });
    }
    if (self.normf_g.size() > 0) f(std::string("normf_g"), self.normf_g);
    if (self.normf_b.size() > 0) f(std::string("normf_b"), self.normf_b);
    if (self.head.size() > 0) f(std::string("head"), self.head);
  }
  template <typename F>
  void for_each(F&& f) { visit(*this, f); }
  template <typename F>
  void for_each(F&& f) const { visit(*this, f); }

  std::vector<Mat*> tensors() {
    std::vector<Mat*> out;
    for_each([&](const std::string&, Mat& m) { out.push_back(&m); });
    return out;
  }
  std::vector<const Mat*> tensors() const {
    std::vector<const Mat*> out;
    for_each([&](const std::string&, const Mat& m) { out.push_back(&m); });
    return out;
  }

  friend bool operator==(const LmState& a, const LmState& b) {
    const auto ta = a.tensors();
    const auto tb = b.tensors();
    if (ta.size() != tb.size()) return false;
    for (std::size_t i = 0; i < ta.size(); ++i) {
      if (ta[i]->rows() != tb[i]->rows() || ta[i]->cols() != tb[i]->cols() || *ta[i] != *tb[i]) {
        return false;
      }
    }
    return true;
  }
};

inline BlockParams zeros_like(const BlockParams& p) {
  BlockParams z = p;
  z.for_each([](const char*, Mat& m) { m.setZero(); });
  return z;
}

inline LmState zeros_like(const LmState& s) {
  LmState z = s;
  z.for_each([](const std::string&, Mat& m) { m.setZero(); });
  return z;
}

inline Mat init_weight(Rng& rng, Index rows, Index cols, double std) {
  Mat m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.truncated_normal(std);
  return m;
}

/// Truncated normal (std 0.02) weights; residual output projections scaled by
/// 1/sqrt(2L); unit norm gains and zero biases.
inline BlockParams init_block(const LmConfig& cfg, Rng& rng) {
  const Index d = cfg.d_model;
  const double s = cfg.init_std;
  const double s_res = s / std::sqrt(2.0 * static_cast<double>(std::max<Index>(cfg.n_layers, 1)));
  BlockParams p;
  p.norm1_g = Mat::Ones(1, d);
  p.norm2_g = Mat::Ones(1, d);
  p.wq = init_weight(rng, d, d, s);
  p.wk = init_weight(rng, d, d, s);
  p.wv = init_weight(rng, d, d, s);
  p.wo = init_weight(rng, d, d, s_res);
  if (cfg.style == Style::Gpt2) {
    p.norm1_b = Mat::Zero(1, d);
    p.norm2_b = Mat::Zero(1, d);
    p.bq = Mat::Zero(1, d);
    p.bk = Mat::Zero(1, d);
    p.bv = Mat::Zero(1, d);
    p.bo = Mat::Zero(1, d);
    p.w_fc = init_weight(rng, cfg.d_ff, d, s);
    p.b_fc = Mat::Zero(1, cfg.d_ff);
    p.w_proj = init_weight(rng, d, cfg.d_ff, s_res);
    p.b_proj = Mat::Zero(1, d);
  } else {
    p.w_gate = init_weight(rng, cfg.d_ff, d, s);
    p.w_up = init_weight(rng, cfg.d_ff, d, s);
    p.w_down = init_weight(rng, d, cfg.d_ff, s_res);
  }
  return p;
}

inline LmState init_lm(const LmConfig& cfg, Rng& rng) {
  cfg.validate();
  LmState st;
  st.tok_emb = init_weight(rng, cfg.vocab_size, cfg.d_model, cfg.init_std);
  if (cfg.style == Style::Gpt2) {
    st.pos_emb = init_weight(rng, cfg.context_len, cfg.d_model, cfg.init_std);
  }
  for (Index l = 0; l < cfg.n_layers; ++l) st.blocks.push_back(init_block(cfg, rng));
  st.normf_g = Mat::Ones(1, cfg.d_model);
  if (cfg.style == Style::Gpt2) st.normf_b = Mat::Zero(1, cfg.d_model);
  st.head = init_weight(rng, cfg.vocab_size, cfg.d_model, cfg.init_std);
  return st;
}

// ---------------------------------------------------------------- batches

/// `batch` sequences of `seq_len` tokens, row-major; targets are the inputs
/// shifted by one position.
struct TokenBatch {
  Index batch = 0;
  Index seq_len = 0;
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> targets;

  Index tokens() const { return batch * seq_len; }
};

inline void check_batch(const TokenBatch& b, const LmConfig& cfg) {
  if (b.seq_len < 1 || b.batch < 1) fail(ErrorKind::InvalidShape, "empty token batch");
  if (b.seq_len > cfg.context_len) {
    fail(ErrorKind::InvalidShape, "sequence length " + std::to_string(b.seq_len) +
                                      " exceeds context length " + std::to_string(cfg.context_len));
  }
  if (static_cast<Index>(b.inputs.size()) != b.tokens()) {
    fail(ErrorKind::InvalidShape, "token batch size mismatch");
  }
  if (!b.targets.empty() && b.targets.size() != b.inputs.size()) {
    fail(ErrorKind::InvalidShape, "target batch size mismatch");
  }
}

// ---------------------------------------------------------------- embedding

inline Mat embed(const TokenBatch& b, const LmState& st, const LmConfig& cfg) {
  check_batch(b, cfg);
  Mat h(b.tokens(), cfg.d_model);
  for (Index r = 0; r < b.tokens(); ++r) {
    const std::int32_t id = b.inputs[static_cast<std::size_t>(r)];
    if (id < 0 || id >= cfg.vocab_size) {
      fail(ErrorKind::InvalidToken, "token id " + std::to_string(id) + " >= vocab size",
           static_cast<std::size_t>(r));
    }
    h.row(r) = st.tok_emb.row(id);
    if (cfg.style == Style::Gpt2) h.row(r) += st.pos_emb.row(r % b.seq_len);
  }
  return h;
}

inline void embed_backward(const TokenBatch& b, const LmConfig& cfg, const Mat& dh, LmState& g) {
  for (Index r = 0; r < b.tokens(); ++r) {
    g.tok_emb.row(b.inputs[static_cast<std::size_t>(r)]) += dh.row(r);
    if (cfg.style == Style::Gpt2) g.pos_emb.row(r % b.seq_len) += dh.row(r);
  }
}

// ---------------------------------------------------------------- blocks

struct BlockCache {
  NormCache n1, n2;
  AttentionCache attn;
  Mat ffn_in;       // normalised input of the feedforward
  Mat pre1, pre2;   // Gpt2: fc pre-activation; Llama: gate and up projections
  Mat act;          // input of the last projection
  Mat w1, w2, w3;   // effective (possibly quantized) feedforward weights
};

inline Mat norm_forward(const Mat& x, const Mat& g, const Mat& b, const LmConfig& cfg,
                        NormCache* c) {
  return cfg.style == Style::Gpt2 ? layernorm_forward(x, g, b, c) : rmsnorm_forward(x, g, c);
}

inline Mat norm_backward(const NormCache& c, const Mat& g, const Mat& dy, const LmConfig& cfg,
                         Mat* dg, Mat* db) {
  return cfg.style == Style::Gpt2 ? layernorm_backward(c, g, dy, dg, db)
                                  : rmsnorm_backward(c, g, dy, dg);
}

inline AttentionParams attn_params(const BlockParams& p) {
  return {&p.wq, &p.wk, &p.wv, &p.wo, &p.bq, &p.bk, &p.bv, &p.bo};
}

inline Mat ffn_weight(const Mat& w, const LmConfig& cfg) { return quant::apply(w, cfg.quant); }

inline Mat block_forward(const BlockParams& p, const Mat& h, Index seq_len, const LmConfig& cfg,
                         const RopeTable* rope, BlockCache* cache = nullptr) {
  BlockCache local;
  BlockCache& c = cache ? *cache : local;
  const Mat a_in = norm_forward(h, p.norm1_g, p.norm1_b, cfg, &c.n1);
  const RopeTable* r = cfg.style == Style::Llama ? rope : nullptr;
  Mat h_mid = h + attention_forward(a_in, attn_params(p), seq_len, cfg.n_heads, r, &c.attn);
  c.ffn_in = norm_forward(h_mid, p.norm2_g, p.norm2_b, cfg, &c.n2);
  Mat ffn;
  if (cfg.style == Style::Gpt2) {
    c.w1 = ffn_weight(p.w_fc, cfg);
    c.w2 = ffn_weight(p.w_proj, cfg);
    c.pre1 = linear_forward(c.ffn_in, c.w1, &p.b_fc);
    c.act = c.pre1.unaryExpr([](double v) { return gelu(v); });
    ffn = linear_forward(c.act, c.w2, &p.b_proj);
  } else {
    c.w1 = ffn_weight(p.w_gate, cfg);
    c.w2 = ffn_weight(p.w_up, cfg);
    c.w3 = ffn_weight(p.w_down, cfg);
    c.pre1 = linear_forward(c.ffn_in, c.w1);
    c.pre2 = linear_forward(c.ffn_in, c.w2);
    c.act = c.pre1.unaryExpr([](double v) { return silu(v); }).cwiseProduct(c.pre2);
    ffn = linear_forward(c.act, c.w3);
  }
  Mat out = h_mid + ffn;
  if (!out.allFinite()) fail(ErrorKind::NumericalFailure, "non-finite block activation");
  return out;
}

/// Accumulates parameter gradients into `g` and returns d(loss)/d(h).
/// Gradients of quantized weights pass straight through the quantizer.
inline Mat block_backward(const BlockParams& p, const BlockCache& c, const Mat& dout,
                          Index seq_len, const LmConfig& cfg, const RopeTable* rope,
                          BlockParams& g) {
  Mat dffn_in;
  if (cfg.style == Style::Gpt2) {
    Mat dact = linear_backward(c.act, c.w2, dout, &g.w_proj, &g.b_proj);
    Mat dpre = dact.cwiseProduct(c.pre1.unaryExpr([](double v) { return gelu_grad(v); }));
    dffn_in = linear_backward(c.ffn_in, c.w1, dpre, &g.w_fc, &g.b_fc);
  } else {
    Mat dact = linear_backward(c.act, c.w3, dout, &g.w_down, nullptr);
    Mat dgate = dact.cwiseProduct(c.pre2).cwiseProduct(
        c.pre1.unaryExpr([](double v) { return silu_grad(v); }));
    Mat dup = dact.cwiseProduct(c.pre1.unaryExpr([](double v) { return silu(v); }));
    dffn_in = linear_backward(c.ffn_in, c.w1, dgate, &g.w_gate, nullptr);
    dffn_in += linear_backward(c.ffn_in, c.w2, dup, &g.w_up, nullptr);
  }
  Mat dh_mid = dout + norm_backward(c.n2, p.norm2_g, dffn_in, cfg, &g.norm2_g,
                                    cfg.style == Style::Gpt2 ? &g.norm2_b : nullptr);
  const RopeTable* r = cfg.style == Style::Llama ? rope : nullptr;
  AttentionGrads ag{&g.wq, &g.wk, &g.wv, &g.wo, &g.bq, &g.bk, &g.bv, &g.bo};
  Mat da = attention_backward(c.attn, attn_params(p), ag, dh_mid, seq_len, cfg.n_heads, r);
  return dh_mid + norm_backward(c.n1, p.norm1_g, da, cfg, &g.norm1_g,
                                cfg.style == Style::Gpt2 ? &g.norm1_b : nullptr);
}

// ---------------------------------------------------------------- model

inline RopeTable make_rope(const LmConfig& cfg) {
  return cfg.style == Style::Llama ? RopeTable(cfg.context_len, cfg.d_head()) : RopeTable();
}

/// h^(0) ... h^(L) for every token row of the batch.
inline std::vector<Mat> hidden_states(const LmState& st, const LmConfig& cfg,
                                      const TokenBatch& b) {
  const RopeTable rope = make_rope(cfg);
  std::vector<Mat> hs;
  hs.push_back(embed(b, st, cfg));
  for (const BlockParams& p : st.blocks) {
    hs.push_back(block_forward(p, hs.back(), b.seq_len, cfg, &rope));
  }
  return hs;
}

/// Logits from the last hidden state through final norm and head.
inline Mat head_logits(const LmState& st, const LmConfig& cfg, const Mat& h_last,
                       NormCache* nc = nullptr, Mat* normed = nullptr, Mat* head_eff = nullptr) {
  Mat n = norm_forward(h_last, st.normf_g, st.normf_b, cfg, nc);
  Mat w = ffn_weight(st.head, cfg);
  Mat logits = n * w.transpose();
  if (normed) *normed = std::move(n);
  if (head_eff) *head_eff = std::move(w);
  return logits;
}

inline Mat forward_logits(const LmState& st, const LmConfig& cfg, const TokenBatch& b) {
  const auto hs = hidden_states(st, cfg, b);
  return head_logits(st, cfg, hs.back());
}

/// Mean next-token cross entropy of the batch.
inline double lm_loss(const LmState& st, const LmConfig& cfg, const TokenBatch& b) {
  return cross_entropy(forward_logits(st, cfg, b), b.targets);
}

/// Token-weighted mean cross entropy over a list of batches.
inline double mean_loss(const LmState& st, const LmConfig& cfg,
                        const std::vector<TokenBatch>& batches) {
  if (batches.empty()) fail(ErrorKind::InvalidArgument, "evaluation split is empty");
  double total = 0.0;
  double count = 0.0;
  for (const TokenBatch& b : batches) {
    const double n = static_cast<double>(b.tokens());
    total += lm_loss(st, cfg, b) * n;
    count += n;
  }
  return total / count;
}

/// Which parameter groups receive gradients; frozen groups are left untouched.
struct GradMask {
  bool embeddings = true;
  std::vector<bool> blocks;  // per block; missing entries use blocks_default
  bool blocks_default = true;
  bool final_norm = true;
  bool head = true;

  bool block(std::size_t i) const { return i < blocks.size() ? blocks[i] : blocks_default; }

  static GradMask head_only(bool with_final_norm = false) {
    GradMask m;
    m.embeddings = false;
    m.blocks_default = false;
    m.final_norm = with_final_norm;
    return m;
  }

  static GradMask single_block(std::size_t index) {
    GradMask m;
    m.embeddings = false;
    m.blocks_default = false;
    m.blocks.assign(index + 1, false);
    m.blocks[index] = true;
    m.final_norm = false;
    m.head = false;
    return m;
  }
};

/// Forward + backward. Gradients are scaled by `weight` and added into `g`
/// (which must be shaped like `st`). Returns the unscaled mean loss.
inline double loss_and_grad(const LmState& st, const LmConfig& cfg, const TokenBatch& b,
                            LmState& g, double weight = 1.0, const GradMask& mask = {}) {
  const RopeTable rope = make_rope(cfg);
  std::vector<Mat> hs;
  std::vector<BlockCache> caches(st.blocks.size());
  hs.push_back(embed(b, st, cfg));
  for (std::size_t l = 0; l < st.blocks.size(); ++l) {
    hs.push_back(block_forward(st.blocks[l], hs.back(), b.seq_len, cfg, &rope, &caches[l]));
  }
  NormCache nc;
  Mat normed, head_eff;
  const Mat logits = head_logits(st, cfg, hs.back(), &nc, &normed, &head_eff);
  Mat dlogits;
  const double loss = cross_entropy(logits, b.targets, &dlogits);
  if (weight != 1.0) dlogits *= weight;

  if (mask.head) g.head.noalias() += dlogits.transpose() * normed;
  bool need_below = mask.embeddings;
  for (std::size_t l = 0; l < st.blocks.size(); ++l) need_below = need_below || mask.block(l);
  if (!need_below && !mask.final_norm) return loss;
  Mat dn = dlogits * head_eff;
  Mat dh = norm_backward(nc, st.normf_g, dn, cfg, mask.final_norm ? &g.normf_g : nullptr,
                         (mask.final_norm && cfg.style == Style::Gpt2) ? &g.normf_b : nullptr);
  if (!need_below) return loss;
  for (std::size_t l = st.blocks.size(); l-- > 0;) {
    if (mask.block(l)) {
      dh = block_backward(st.blocks[l], caches[l], dh, b.seq_len, cfg, &rope, g.blocks[l]);
    } else {
      BlockParams scratch = zeros_like(st.blocks[l]);
      dh = block_backward(st.blocks[l], caches[l], dh, b.seq_len, cfg, &rope, scratch);
    }
    bool more = mask.embeddings;
    for (std::size_t k = 0; k < l; ++k) more = more || mask.block(k);
    if (!more) return loss;
  }
  if (mask.embeddings) embed_backward(b, cfg, dh, g);
  return loss;
}

}  // namespace yesbound::lm
