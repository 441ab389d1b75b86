#pragma once

// Differentiable building blocks of the decoder. Activations are stored as
// (sequences * positions) x features, one token per row. Every forward has a
// matching backward that accumulates parameter gradients (+=) and returns the
// input gradient.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <vector>

#include "yesbound/linalg.hpp"

namespace yesbound::lm {

inline constexpr double kNormEps = 1e-6;
inline constexpr double kRopeBase = 10000.0;

// ---------------------------------------------------------------- linear

/// y = x W^T (+ b)
inline Mat linear_forward(const Mat& x, const Mat& w, const Mat* b = nullptr) {
  Mat y = x * w.transpose();
  if (b && b->size() > 0) y.rowwise() += b->row(0);
  return y;
}

inline Mat linear_backward(const Mat& x, const Mat& w, const Mat& dy, Mat* dw, Mat* db) {
  if (dw) dw->noalias() += dy.transpose() * x;
  if (db && db->size() > 0) db->row(0) += dy.colwise().sum();
  return dy * w;
}

// ---------------------------------------------------------------- norms

struct NormCache {
  Mat xhat;                  // normalised input before gain
  Eigen::VectorXd inv_scale;  // 1/sigma (layernorm) or 1/rms per row
};

/// Row-wise layernorm: g * (x - mean) / sqrt(var + eps) + b.
inline Mat layernorm_forward(const Mat& x, const Mat& g, const Mat& b, NormCache* cache) {
  const Index n = x.rows();
  const double d = static_cast<double>(x.cols());
  Mat xhat(x.rows(), x.cols());
  Eigen::VectorXd inv(n);
  for (Index i = 0; i < n; ++i) {
    const double mu = x.row(i).sum() / d;
    const double var = (x.row(i).array() - mu).square().sum() / d;
    inv(i) = 1.0 / std::sqrt(var + kNormEps);
    xhat.row(i) = (x.row(i).array() - mu) * inv(i);
  }
  Mat y = xhat.array().rowwise() * g.row(0).array();
  y.rowwise() += b.row(0);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_scale = std::move(inv);
  }
  return y;
}

inline Mat layernorm_backward(const NormCache& c, const Mat& g, const Mat& dy, Mat* dg, Mat* db) {
  const double d = static_cast<double>(dy.cols());
  if (dg) dg->row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  if (db) db->row(0) += dy.colwise().sum();
  Mat dxhat = dy.array().rowwise() * g.row(0).array();
  Mat dx(dy.rows(), dy.cols());
  for (Index i = 0; i < dy.rows(); ++i) {
    const double m1 = dxhat.row(i).sum() / d;
    const double m2 = dxhat.row(i).dot(c.xhat.row(i)) / d;
    dx.row(i) = c.inv_scale(i) * (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2);
  }
  return dx;
}

/// Row-wise RMSNorm: g * x / sqrt(mean(x^2) + eps).
inline Mat rmsnorm_forward(const Mat& x, const Mat& g, NormCache* cache) {
  const Index n = x.rows();
  const double d = static_cast<double>(x.cols());
  Mat xhat(x.rows(), x.cols());
  Eigen::VectorXd inv(n);
  for (Index i = 0; i < n; ++i) {
    inv(i) = 1.0 / std::sqrt(x.row(i).squaredNorm() / d + kNormEps);
    xhat.row(i) = x.row(i) * inv(i);
  }
  Mat y = xhat.array().rowwise() * g.row(0).array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_scale = std::move(inv);
  }
  return y;
}

inline Mat rmsnorm_backward(const NormCache& c, const Mat& g, const Mat& dy, Mat* dg) {
  const double d = static_cast<double>(dy.cols());
  if (dg) dg->row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  Mat dxhat = dy.array().rowwise() * g.row(0).array();
  Mat dx(dy.rows(), dy.cols());
  for (Index i = 0; i < dy.rows(); ++i) {
    const double m = dxhat.row(i).dot(c.xhat.row(i)) / d;
    dx.row(i) = c.inv_scale(i) * (dxhat.row(i).array() - c.xhat.row(i).array() * m);
  }
  return dx;
}

/// Single-vector conveniences.
inline RowVec rmsnorm(const RowVec& v, const RowVec& gain) {
  Mat x = v;
  Mat g = gain;
  return rmsnorm_forward(x, g, nullptr).row(0);
}

inline RowVec layernorm(const RowVec& v, const RowVec& gain, const RowVec& bias) {
  Mat x = v;
  Mat g = gain;
  Mat b = bias;
  return layernorm_forward(x, g, b, nullptr).row(0);
}

// ---------------------------------------------------------------- activations

inline double gelu(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
  constexpr double k = 0.7978845608028654;
  const double t = std::tanh(k * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * x * x);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double silu(double x) { return x * sigmoid(x); }
inline double silu_grad(double x) {
  const double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

// ---------------------------------------------------------------- RoPE

/// cos/sin tables for positions 0..T-1 and frequencies 10000^(-2i/d_head).
struct RopeTable {
  Index d_head = 0;
  Mat cos, sin;  // T x d_head/2

  RopeTable() = default;
  RopeTable(Index context_len, Index head_dim) : d_head(head_dim) {
    if (head_dim % 2 != 0) fail(ErrorKind::InvalidShape, "RoPE needs an even head dimension");
    const Index half = head_dim / 2;
    cos.resize(context_len, half);
    sin.resize(context_len, half);
    for (Index t = 0; t < context_len; ++t) {
      for (Index i = 0; i < half; ++i) {
        const double theta =
            std::pow(kRopeBase, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
        const double a = static_cast<double>(t) * theta;
        cos(t, i) = std::cos(a);
        sin(t, i) = std::sin(a);
      }
    }
  }
};

/// Rotates consecutive pairs (2i, 2i+1) of every head slice in place. Row r
/// sits at position r % seq_len. `inverse` applies the transpose rotation
/// (which is also the backward pass).
inline void rope_apply(Mat& m, Index seq_len, Index n_heads, const RopeTable& table,
                       bool inverse = false) {
  const Index dh = table.d_head;
  const Index half = dh / 2;
  const double sgn = inverse ? -1.0 : 1.0;
  for (Index r = 0; r < m.rows(); ++r) {
    const Index t = r % seq_len;
    for (Index h = 0; h < n_heads; ++h) {
      for (Index i = 0; i < half; ++i) {
        const Index c0 = h * dh + 2 * i;
        const double c = table.cos(t, i);
        const double s = sgn * table.sin(t, i);
        const double x0 = m(r, c0);
        const double x1 = m(r, c0 + 1);
        m(r, c0) = x0 * c - x1 * s;
        m(r, c0 + 1) = x0 * s + x1 * c;
      }
    }
  }
}

/// Rotates a T x d_head block whose row t sits at positions[t].
inline Mat rope_rotate(const Mat& v, const std::vector<Index>& positions) {
  if (v.cols() % 2 != 0) fail(ErrorKind::InvalidShape, "RoPE needs an even head dimension");
  if (static_cast<Index>(positions.size()) != v.rows()) {
    fail(ErrorKind::InvalidShape, "one position per row required");
  }
  const Index half = v.cols() / 2;
  Mat out = v;
  for (Index r = 0; r < v.rows(); ++r) {
    for (Index i = 0; i < half; ++i) {
      const double theta =
          std::pow(kRopeBase, -2.0 * static_cast<double>(i) / static_cast<double>(v.cols()));
      const double a = static_cast<double>(positions[static_cast<std::size_t>(r)]) * theta;
      const double c = std::cos(a);
      const double s = std::sin(a);
      const double x0 = v(r, 2 * i);
      const double x1 = v(r, 2 * i + 1);
      out(r, 2 * i) = x0 * c - x1 * s;
      out(r, 2 * i + 1) = x0 * s + x1 * c;
    }
  }
  return out;
}

// ---------------------------------------------------------------- attention

struct AttentionCache {
  Mat x;           // input
  Mat q, k, v;     // projected (q, k after RoPE when enabled)
  Mat o;           // concatenated head outputs, before the output projection
  std::vector<Mat> probs;  // one T x T matrix per (sequence, head)
};

struct AttentionParams {
  const Mat* wq;
  const Mat* wk;
  const Mat* wv;
  const Mat* wo;
  const Mat* bq = nullptr;
  const Mat* bk = nullptr;
  const Mat* bv = nullptr;
  const Mat* bo = nullptr;
};

struct AttentionGrads {
  Mat* wq;
  Mat* wk;
  Mat* wv;
  Mat* wo;
  Mat* bq = nullptr;
  Mat* bk = nullptr;
  Mat* bv = nullptr;
  Mat* bo = nullptr;
};

/// Causal multi-head self-attention over `x` holding whole sequences of
/// length seq_len back to back. `rope` may be null (no rotary embedding).
inline Mat attention_forward(const Mat& x, const AttentionParams& p, Index seq_len,
                             Index n_heads, const RopeTable* rope, AttentionCache* cache) {
  const Index n = x.rows();
  const Index d = x.cols();
  if (n % seq_len != 0) fail(ErrorKind::InvalidShape, "rows are not whole sequences");
  if (d % n_heads != 0) fail(ErrorKind::InvalidShape, "d_model not divisible by n_heads");
  const Index dh = d / n_heads;
  const Index nseq = n / seq_len;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat q = linear_forward(x, *p.wq, p.bq);
  Mat k = linear_forward(x, *p.wk, p.bk);
  Mat v = linear_forward(x, *p.wv, p.bv);
  if (rope) {
    rope_apply(q, seq_len, n_heads, *rope);
    rope_apply(k, seq_len, n_heads, *rope);
  }
  Mat o = Mat::Zero(n, d);
  std::vector<Mat> probs;
  if (cache) probs.reserve(static_cast<std::size_t>(nseq * n_heads));
  for (Index s = 0; s < nseq; ++s) {
    const Index r0 = s * seq_len;
    for (Index h = 0; h < n_heads; ++h) {
      const Index c0 = h * dh;
      Mat scores = q.block(r0, c0, seq_len, dh) * k.block(r0, c0, seq_len, dh).transpose();
      Mat pm = Mat::Zero(seq_len, seq_len);
      for (Index t = 0; t < seq_len; ++t) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Index u = 0; u <= t; ++u) mx = std::max(mx, scores(t, u) * scale);
        double z = 0.0;
        for (Index u = 0; u <= t; ++u) {
          const double e = std::exp(scores(t, u) * scale - mx);
          pm(t, u) = e;
          z += e;
        }
        for (Index u = 0; u <= t; ++u) pm(t, u) /= z;
      }
      o.block(r0, c0, seq_len, dh) = pm * v.block(r0, c0, seq_len, dh);
      if (cache) probs.push_back(std::move(pm));
    }
  }
  Mat out = linear_forward(o, *p.wo, p.bo);
  if (cache) {
    cache->x = x;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->o = std::move(o);
    cache->probs = std::move(probs);
  }
  return out;
}

inline Mat attention_backward(const AttentionCache& c, const AttentionParams& p,
                              const AttentionGrads& g, const Mat& dout, Index seq_len,
                              Index n_heads, const RopeTable* rope) {
  const Index n = dout.rows();
  const Index d = dout.cols();
  const Index dh = d / n_heads;
  const Index nseq = n / seq_len;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat d_o = linear_backward(c.o, *p.wo, dout, g.wo, g.bo);
  Mat dq = Mat::Zero(n, d);
  Mat dk = Mat::Zero(n, d);
  Mat dv = Mat::Zero(n, d);
  std::size_t idx = 0;
  for (Index s = 0; s < nseq; ++s) {
    const Index r0 = s * seq_len;
    for (Index h = 0; h < n_heads; ++h, ++idx) {
      const Index c0 = h * dh;
      const Mat& pm = c.probs[idx];
      const auto doh = d_o.block(r0, c0, seq_len, dh);
      dv.block(r0, c0, seq_len, dh) = pm.transpose() * doh;
      Mat dp = doh * c.v.block(r0, c0, seq_len, dh).transpose();
      Mat ds(seq_len, seq_len);
      for (Index t = 0; t < seq_len; ++t) {
        const double dot = dp.row(t).dot(pm.row(t));
        ds.row(t) = pm.row(t).array() * (dp.row(t).array() - dot);
      }
      ds *= scale;
      dq.block(r0, c0, seq_len, dh) = ds * c.k.block(r0, c0, seq_len, dh);
      dk.block(r0, c0, seq_len, dh) = ds.transpose() * c.q.block(r0, c0, seq_len, dh);
    }
  }
  if (rope) {
    rope_apply(dq, seq_len, n_heads, *rope, true);
    rope_apply(dk, seq_len, n_heads, *rope, true);
  }
  Mat dx = linear_backward(c.x, *p.wq, dq, g.wq, g.bq);
  dx += linear_backward(c.x, *p.wk, dk, g.wk, g.bk);
  dx += linear_backward(c.x, *p.wv, dv, g.wv, g.bv);
  return dx;
}

// ---------------------------------------------------------------- loss

/// Mean token cross entropy with log-sum-exp stabilisation. When `dlogits`
/// is given it receives d(loss)/d(logits).
inline double cross_entropy(const Mat& logits, const std::vector<std::int32_t>& targets,
                            Mat* dlogits = nullptr) {
  const Index n = logits.rows();
  if (static_cast<Index>(targets.size()) != n) {
    fail(ErrorKind::InvalidShape, "one target per logit row required");
  }
  if (dlogits) dlogits->resize(n, logits.cols());
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const std::int32_t t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= logits.cols()) fail(ErrorKind::InvalidToken, "target id out of range", i);
    const double mx = logits.row(i).maxCoeff();
    const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    total += lse - logits(i, t);
    if (dlogits) {
      dlogits->row(i) = (logits.row(i).array() - lse).exp();
      (*dlogits)(i, t) -= 1.0;
    }
  }
  if (dlogits && n > 0) *dlogits /= static_cast<double>(n);
  return n > 0 ? total / static_cast<double>(n) : 0.0;
}

}  // namespace yesbound::lm
