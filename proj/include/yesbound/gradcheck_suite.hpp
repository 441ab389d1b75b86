#pragma once

// Finite-difference checks of every hand-written backward pass.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "yesbound/fcnn.hpp"
#include "yesbound/gradcheck.hpp"
#include "yesbound/lm/model.hpp"
#include "yesbound/lm/ops.hpp"
#include "yesbound/rng.hpp"

namespace yesbound::gradsuite {

inline constexpr double kTolerance = 1e-4;
inline constexpr double kEps = 1e-5;

struct CaseResult {
  std::string name;
  linalg::GradCheckReport report;
  std::string worst_tensor;
  bool passed() const { return report.max_rel_error < kTolerance; }
};

/// Checks each (name, tensor, analytic) triple; `f` reads the tensors by
/// pointer, so it sees each probe in place.
struct Probe {
  std::string name;
  Mat* tensor;
  Mat analytic;
  bool zero_gradient = false;  // loss is invariant to this tensor
};

inline constexpr double kZeroGradAbs = 1e-9;

/// For tensors the loss does not depend on, relative error only measures
/// roundoff; require both gradients to vanish absolutely instead.
inline linalg::GradCheckReport check_zero_gradient(const std::function<double(const Mat&)>& f,
                                                   const Mat& x, const Mat& analytic, double eps) {
  linalg::GradCheckReport r;
  r.eps = eps;
  Mat probe = x;
  for (Index i = 0; i < x.rows(); ++i) {
    for (Index j = 0; j < x.cols(); ++j) {
      const double orig = probe(i, j);
      probe(i, j) = orig + eps;
      const double fp = f(probe);
      probe(i, j) = orig - eps;
      const double fm = f(probe);
      probe(i, j) = orig;
      const double n = (fp - fm) / (2.0 * eps);
      const double a = analytic(i, j);
      if (std::max(std::abs(a), std::abs(n)) >= kZeroGradAbs) {
        const double err = std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
        if (err > r.max_rel_error) {
          r.max_rel_error = err;
          r.worst_coordinate = {i, j};
          r.analytic_at_worst = a;
          r.numeric_at_worst = n;
        }
      }
    }
  }
  return r;
}

inline CaseResult run_case(const std::string& name, std::vector<Probe> probes,
                           const std::function<double()>& f, double eps = kEps) {
  CaseResult out{name, {}, {}};
  bool first = true;
  for (Probe& p : probes) {
    const Mat saved = *p.tensor;
    auto fx = [&](const Mat& m) {
      *p.tensor = m;
      return f();
    };
    const auto r = p.zero_gradient ? check_zero_gradient(fx, saved, p.analytic, eps)
                                   : linalg::grad_check(fx, saved, p.analytic, eps);
    *p.tensor = saved;
    if (first || r.max_rel_error > out.report.max_rel_error) {
      out.report = r;
      out.worst_tensor = p.name;
      first = false;
    }
  }
  return out;
}

inline double weighted_sum(const Mat& y, const Mat& r) { return y.cwiseProduct(r).sum(); }

inline CaseResult check_layernorm(Rng& rng) {
  Mat x = rng.normal_matrix(4, 6, 1.0);
  Mat g = rng.normal_matrix(1, 6, 1.0);
  Mat b = rng.normal_matrix(1, 6, 1.0);
  const Mat r = rng.normal_matrix(4, 6, 1.0);
  lm::NormCache c;
  lm::layernorm_forward(x, g, b, &c);
  Mat dg = Mat::Zero(1, 6);
  Mat db = Mat::Zero(1, 6);
  Mat dx = lm::layernorm_backward(c, g, r, &dg, &db);
  return run_case("layernorm", {{"x", &x, dx}, {"gain", &g, dg}, {"bias", &b, db}},
                  [&] { return weighted_sum(lm::layernorm_forward(x, g, b, nullptr), r); });
}

inline CaseResult check_rmsnorm(Rng& rng) {
  Mat x = rng.normal_matrix(4, 6, 1.0);
  Mat g = rng.normal_matrix(1, 6, 1.0);
  const Mat r = rng.normal_matrix(4, 6, 1.0);
  lm::NormCache c;
  lm::rmsnorm_forward(x, g, &c);
  Mat dg = Mat::Zero(1, 6);
  Mat dx = lm::rmsnorm_backward(c, g, r, &dg);
  return run_case("rmsnorm", {{"x", &x, dx}, {"gain", &g, dg}},
                  [&] { return weighted_sum(lm::rmsnorm_forward(x, g, nullptr), r); });
}

inline CaseResult check_attention(Rng& rng, bool rope, bool biases) {
  const Index seq = 4, heads = 2, d = 8, n = 2 * seq;
  Mat x = rng.normal_matrix(n, d, 1.0);
  Mat wq = rng.normal_matrix(d, d, 0.5), wk = rng.normal_matrix(d, d, 0.5);
  Mat wv = rng.normal_matrix(d, d, 0.5), wo = rng.normal_matrix(d, d, 0.5);
  Mat bq, bk, bv, bo;
  if (biases) {
    bq = rng.normal_matrix(1, d, 0.5);
    bk = rng.normal_matrix(1, d, 0.5);
    bv = rng.normal_matrix(1, d, 0.5);
    bo = rng.normal_matrix(1, d, 0.5);
  }
  const Mat r = rng.normal_matrix(n, d, 1.0);
  const lm::RopeTable table(seq, d / heads);
  const lm::RopeTable* rp = rope ? &table : nullptr;
  const lm::AttentionParams p{&wq, &wk, &wv, &wo, &bq, &bk, &bv, &bo};
  lm::AttentionCache c;
  lm::attention_forward(x, p, seq, heads, rp, &c);
  Mat dwq = Mat::Zero(d, d), dwk = Mat::Zero(d, d), dwv = Mat::Zero(d, d), dwo = Mat::Zero(d, d);
  Mat dbq = Mat::Zero(bq.rows(), bq.cols()), dbk = dbq, dbv = dbq, dbo = dbq;
  const lm::AttentionGrads g{&dwq, &dwk, &dwv, &dwo, &dbq, &dbk, &dbv, &dbo};
  Mat dx = lm::attention_backward(c, p, g, r, seq, heads, rp);
  std::vector<Probe> probes{{"x", &x, dx}, {"wq", &wq, dwq}, {"wk", &wk, dwk}, {"wv", &wv, dwv}, {"wo", &wo, dwo}};
  if (biases) {
    probes.push_back({"bq", &bq, dbq});
    probes.push_back({"bk", &bk, dbk, true});
    probes.push_back({"bv", &bv, dbv});
    probes.push_back({"bo", &bo, dbo});
  }
  return run_case(rope ? "rope_attention" : "attention_with_bias", std::move(probes),
                  [&] { return weighted_sum(lm::attention_forward(x, p, seq, heads, rp, nullptr), r); });
}

inline lm::LmConfig tiny_config(lm::Style style, Index layers) {
  lm::LmConfig cfg;
  cfg.style = style;
  cfg.vocab_size = 11;
  cfg.context_len = 5;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_ff = 12;
  cfg.n_layers = layers;
  cfg.init_std = 0.3;
  return cfg;
}

inline lm::BlockParams randomized_block(const lm::LmConfig& cfg, Rng& rng) {
  lm::BlockParams p = lm::init_block(cfg, rng);
  // non-trivial gains and biases so their gradients are exercised
  p.for_each([&](const char*, Mat& m) {
    if (m.rows() == 1) m += rng.normal_matrix(1, m.cols(), 0.3);
  });
  return p;
}

/// Whole pre-norm block; the feedforward half is SwiGLU (Llama) or GELU (Gpt2).
inline CaseResult check_block(Rng& rng, lm::Style style) {
  const lm::LmConfig cfg = tiny_config(style, 1);
  const Index seq = 5;
  lm::BlockParams p = randomized_block(cfg, rng);
  Mat h = rng.normal_matrix(2 * seq, cfg.d_model, 1.0);
  const Mat r = rng.normal_matrix(2 * seq, cfg.d_model, 1.0);
  const lm::RopeTable rope = lm::make_rope(cfg);
  lm::BlockCache c;
  lm::block_forward(p, h, seq, cfg, &rope, &c);
  lm::BlockParams g = lm::zeros_like(p);
  Mat dh = lm::block_backward(p, c, r, seq, cfg, &rope, g);
  std::vector<Probe> probes{{"h", &h, dh}};
  std::vector<Mat*> grads;
  g.for_each([&](const char*, Mat& m) { grads.push_back(&m); });
  std::size_t i = 0;
  p.for_each([&](const char* name, Mat& m) {
    probes.push_back({name, &m, *grads[i++], std::string(name) == "bk"});
  });
  return run_case(style == lm::Style::Llama ? "swiglu_block" : "gelu_block", std::move(probes),
                  [&] { return weighted_sum(lm::block_forward(p, h, seq, cfg, &rope), r); });
}

inline CaseResult check_cross_entropy(Rng& rng) {
  Mat logits = rng.normal_matrix(5, 7, 2.0);
  std::vector<std::int32_t> t;
  for (int i = 0; i < 5; ++i) t.push_back(static_cast<std::int32_t>(rng.below(7)));
  Mat d;
  lm::cross_entropy(logits, t, &d);
  return run_case("cross_entropy", {{"logits", &logits, d}},
                  [&] { return lm::cross_entropy(logits, t); });
}

inline lm::TokenBatch random_batch(Rng& rng, Index batch, Index seq, Index vocab) {
  lm::TokenBatch b;
  b.batch = batch;
  b.seq_len = seq;
  for (Index i = 0; i < batch * seq; ++i) {
    b.inputs.push_back(static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(vocab))));
    b.targets.push_back(static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(vocab))));
  }
  return b;
}

inline CaseResult check_model(Rng& rng, lm::Style style) {
  const lm::LmConfig cfg = tiny_config(style, 2);
  lm::LmState st = lm::init_lm(cfg, rng);
  for (auto& b : st.blocks) b = randomized_block(cfg, rng);
  const lm::TokenBatch batch = random_batch(rng, 2, cfg.context_len, cfg.vocab_size);
  lm::LmState g = lm::zeros_like(st);
  lm::loss_and_grad(st, cfg, batch, g);
  std::vector<std::pair<std::string, Mat*>> named;
  st.for_each([&](const std::string& n, Mat& m) { named.emplace_back(n, &m); });
  const auto gt = g.tensors();
  std::vector<Probe> probes;
  for (std::size_t i = 0; i < named.size(); ++i) {
    const bool key_bias = named[i].first.size() >= 3 && named[i].first.ends_with(".bk");
    probes.push_back({named[i].first, named[i].second, *gt[i], key_bias});
  }
  return run_case(style == lm::Style::Llama ? "llama_2layer_model" : "gpt2_2layer_model",
                  std::move(probes), [&] { return lm::lm_loss(st, cfg, batch); });
}

inline CaseResult check_fcnn(Rng& rng) {
  fcnn::FcnnSpec spec;
  spec.layer_widths = {6, 5, 4, 3};
  spec.bias = true;
  fcnn::FcnnState s = fcnn::init_state(spec, rng);
  const Mat x = rng.normal_matrix(6, 9, 1.0);
  const Mat y = rng.normal_matrix(3, 9, 1.0);
  const auto grads = fcnn::gradients(spec, s, x, y);
  std::vector<Probe> probes;
  for (std::size_t k = 0; k < grads.size(); ++k) probes.push_back({"W" + std::to_string(k + 1), &s.weights[k], grads[k]});
  return run_case("relu_fcnn", std::move(probes), [&] { return fcnn::loss(spec, s, x, y); });
}

inline std::vector<CaseResult> run_all(std::uint64_t seed = 7) {
  Rng rng(seed);
  std::vector<CaseResult> out;
  out.push_back(check_layernorm(rng));
  out.push_back(check_rmsnorm(rng));
  out.push_back(check_attention(rng, true, false));
  out.push_back(check_attention(rng, false, true));
  out.push_back(check_block(rng, lm::Style::Llama));
  out.push_back(check_block(rng, lm::Style::Gpt2));
  out.push_back(check_cross_entropy(rng));
  out.push_back(check_model(rng, lm::Style::Llama));
  out.push_back(check_model(rng, lm::Style::Gpt2));
  out.push_back(check_fcnn(rng));
  return out;
}

}  // namespace yesbound::gradsuite
