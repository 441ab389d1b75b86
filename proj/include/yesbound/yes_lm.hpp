#pragma once

// Layer-wise reference construction for decoder language models.
//
// The teacher is frozen and its hidden states h^(0..L) on a small cache of
// sequences become regression targets. A YES model with L' blocks reuses the
// teacher's embeddings; block l is trained to map the YES model's own
// h~^(l-1) onto h^(pi(l)), then frozen. Finally the output head is fitted with
// next-token cross entropy and the result is scored on the original loss.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "yesbound/lm/model.hpp"
#include "yesbound/optim.hpp"
#include "yesbound/rng.hpp"

namespace yesbound::yes {

struct TeacherCache {
  lm::TokenBatch batch;
  std::vector<Mat> hidden;  // h^(0) ... h^(L), one token per row
  std::int64_t epoch = 0;

  Index size() const { return batch.batch; }
  Index teacher_depth() const { return static_cast<Index>(hidden.size()) - 1; }
};

inline TeacherCache cache_teacher(const lm::LmState& teacher, const lm::LmConfig& cfg,
                                  const lm::TokenBatch& batch, std::int64_t epoch = 0) {
  if (static_cast<Index>(teacher.blocks.size()) != cfg.n_layers) {
    fail(ErrorKind::InvalidShape, "teacher has " + std::to_string(teacher.blocks.size()) +
                                      " blocks, config says " + std::to_string(cfg.n_layers));
  }
  TeacherCache c;
  c.batch = batch;
  c.hidden = lm::hidden_states(teacher, cfg, batch);
  c.epoch = epoch;
  return c;
}

// ---------------------------------------------------------------- permutations

struct PermutationSpec {
  std::string name;
  std::vector<Index> targets;  // pi(1) ... pi(L')

  Index depth() const { return static_cast<Index>(targets.size()); }

  static PermutationSpec direct(Index layers, std::string name = "direct") {
    PermutationSpec p{std::move(name), {}};
    for (Index l = 1; l <= layers; ++l) p.targets.push_back(l);
    return p;
  }
};

inline std::string describe(const PermutationSpec& p) {
  std::string s = "[";
  for (std::size_t i = 0; i < p.targets.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(p.targets[i]);
  }
  return s + "]";
}

/// Throws InvalidPermutation naming the 1-based index of the first entry that
/// breaks the rules: at most L entries, targets within 0..L, non-decreasing,
/// and pi(l) >= l.
inline void validate_permutation(const PermutationSpec& p, Index teacher_layers) {
  const std::string who = (p.name.empty() ? std::string("permutation") : p.name) + " " + describe(p);
  if (p.targets.empty()) fail(ErrorKind::InvalidPermutation, who + ": no YES layers");
  if (p.depth() > teacher_layers) {
    fail(ErrorKind::InvalidPermutation,
         who + ": more YES layers than the teacher's " + std::to_string(teacher_layers),
         static_cast<std::size_t>(teacher_layers + 1));
  }
  for (std::size_t i = 0; i < p.targets.size(); ++i) {
    const Index l = static_cast<Index>(i) + 1;
    const Index t = p.targets[i];
    if (t < 0 || t > teacher_layers) {
      fail(ErrorKind::InvalidPermutation,
           who + ": target " + std::to_string(t) + " outside 0.." + std::to_string(teacher_layers),
           i + 1);
    }
    if (i > 0 && t < p.targets[i - 1]) {
      fail(ErrorKind::InvalidPermutation, who + ": decreasing at entry " + std::to_string(l), i + 1);
    }
    if (t < l) {
      fail(ErrorKind::InvalidPermutation,
           who + ": layer " + std::to_string(l) + " targets shallower layer " + std::to_string(t),
           i + 1);
    }
  }
}

// ---------------------------------------------------------------- model

enum class YesInit { Random, TeacherCopy };

struct YesConfig {
  double layer_lr = 1e-3;
  double head_lr = 5e-4;
  Index layer_iterations = 6;
  Index head_iterations = 6;
  bool fit_final_norm = false;
  YesInit init = YesInit::Random;
  bool deferred_quant = true;  // fit in full precision, quantize afterwards
  double weight_decay = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(layer_lr >= 0.0) || !(head_lr >= 0.0)) {
      fail(ErrorKind::InvalidSpec, "YES learning rates must be non-negative");
    }
    if (layer_iterations < 0 || head_iterations < 0) {
      fail(ErrorKind::InvalidSpec, "YES iteration budgets must be non-negative");
    }
  }
};

inline YesInit init_from_string(const std::string& s) {
  if (s == "random") return YesInit::Random;
  if (s == "teacher" || s == "teacher_copy") return YesInit::TeacherCopy;
  fail(ErrorKind::InvalidSpec, "unknown YES init '" + s + "'");
}

struct YesModel {
  lm::LmConfig cfg;  // n_layers = L'
  lm::LmState state;
  PermutationSpec perm;
  quant::QuantSpec eval_quant{};  // applied once fitting is over
};

inline YesModel make_yes_model(const lm::LmState& teacher, const lm::LmConfig& tcfg,
                               const PermutationSpec& perm, const YesConfig& yc, Rng& rng) {
  validate_permutation(perm, tcfg.n_layers);
  YesModel y;
  y.perm = perm;
  y.cfg = tcfg;
  y.cfg.n_layers = perm.depth();
  y.eval_quant = tcfg.quant;
  if (yc.deferred_quant) y.cfg.quant = {};
  y.state = lm::init_lm(y.cfg, rng);
  y.state.tok_emb = teacher.tok_emb;
  y.state.pos_emb = teacher.pos_emb;
  y.state.normf_g = teacher.normf_g;
  y.state.normf_b = teacher.normf_b;
  if (yc.init == YesInit::TeacherCopy) {
    for (Index l = 1; l <= perm.depth(); ++l) {
      const Index t = perm.targets[static_cast<std::size_t>(l - 1)];
      if (t >= 1) y.state.blocks[static_cast<std::size_t>(l - 1)] = teacher.blocks[static_cast<std::size_t>(t - 1)];
    }
    y.state.head = teacher.head;
  }
  return y;
}

/// h~^(layer-1): the YES model's own representation feeding block `layer`.
inline Mat yes_input(const YesModel& y, const lm::TokenBatch& b, Index layer) {
  const lm::RopeTable rope = lm::make_rope(y.cfg);
  Mat h = lm::embed(b, y.state, y.cfg);
  for (Index l = 0; l + 1 < layer; ++l) {
    h = lm::block_forward(y.state.blocks[static_cast<std::size_t>(l)], h, b.seq_len, y.cfg, &rope);
  }
  return h;
}

/// Mean of squared entries.
inline double regression_loss(const Mat& out, const Mat& target) {
  return (out - target).squaredNorm() / static_cast<double>(out.size());
}

struct FitTrace {
  std::vector<double> history;  // loss before every step, then after the last
  double loss = 0.0;
};

inline optim::OptimizerConfig fit_optimizer(double lr, double weight_decay) {
  optim::OptimizerConfig oc;
  oc.kind = optim::Kind::AdamW;
  oc.lr = lr > 0.0 ? lr : 1.0;
  oc.weight_decay = weight_decay;
  return oc;
}

/// Trains block `layer` (1-based) of the YES model against h^(pi(layer));
/// every other parameter stays untouched.
inline FitTrace fit_yes_layer(YesModel& y, Index layer, const TeacherCache& cache,
                              const YesConfig& yc) {
  if (layer < 1 || layer > y.cfg.n_layers) {
    fail(ErrorKind::InvalidArgument, "YES layer " + std::to_string(layer) + " out of range");
  }
  const Index target_layer = y.perm.targets[static_cast<std::size_t>(layer - 1)];
  if (target_layer > cache.teacher_depth()) {
    fail(ErrorKind::InvalidPermutation, "target layer beyond cached teacher depth",
         static_cast<std::size_t>(layer));
  }
  const Mat& target = cache.hidden[static_cast<std::size_t>(target_layer)];
  const Mat input = yes_input(y, cache.batch, layer);
  const lm::RopeTable rope = lm::make_rope(y.cfg);
  const Index seq = cache.batch.seq_len;
  lm::BlockParams& block = y.state.blocks[static_cast<std::size_t>(layer - 1)];

  optim::Optimizer opt(fit_optimizer(yc.layer_lr, yc.weight_decay));
  std::vector<Mat*> params;
  block.for_each([&](const char*, Mat& m) { params.push_back(&m); });

  FitTrace tr;
  for (Index it = 0; it <= yc.layer_iterations; ++it) {
    lm::BlockCache c;
    const Mat out = lm::block_forward(block, input, seq, y.cfg, &rope, &c);
    const double l = regression_loss(out, target);
    if (!std::isfinite(l)) fail(ErrorKind::NumericalFailure, "YES layer regression loss is not finite");
    tr.history.push_back(l);
    if (it == yc.layer_iterations) break;
    const Mat dout = (2.0 / static_cast<double>(out.size())) * (out - target);
    lm::BlockParams g = lm::zeros_like(block);
    lm::block_backward(block, c, dout, seq, y.cfg, &rope, g);
    std::vector<const Mat*> grads;
    g.for_each([&](const char*, const Mat& m) { grads.push_back(&m); });
    opt.step(params, grads, yc.layer_lr);
  }
  tr.loss = tr.history.back();
  return tr;
}

/// Trains the output head (and optionally the final norm) on the cache with
/// every block frozen.
inline FitTrace fit_output_head(YesModel& y, const TeacherCache& cache, const YesConfig& yc) {
  optim::Optimizer opt(fit_optimizer(yc.head_lr, yc.weight_decay));
  std::vector<Mat*> params{&y.state.head};
  if (yc.fit_final_norm) {
    params.push_back(&y.state.normf_g);
    if (y.state.normf_b.size() > 0) params.push_back(&y.state.normf_b);
  }
  const lm::GradMask mask = lm::GradMask::head_only(yc.fit_final_norm);
  FitTrace tr;
  for (Index it = 0; it < yc.head_iterations; ++it) {
    lm::LmState g = lm::zeros_like(y.state);
    tr.history.push_back(lm::loss_and_grad(y.state, y.cfg, cache.batch, g, 1.0, mask));
    std::vector<const Mat*> grads{&g.head};
    if (yc.fit_final_norm) {
      grads.push_back(&g.normf_g);
      if (g.normf_b.size() > 0) grads.push_back(&g.normf_b);
    }
    opt.step(params, grads, yc.head_lr);
  }
  tr.history.push_back(lm::lm_loss(y.state, y.cfg, cache.batch));
  tr.loss = tr.history.back();
  return tr;
}

/// Switches a fitted model to the teacher's quantizer (deferred quantization).
inline void finalize(YesModel& y) { y.cfg.quant = y.eval_quant; }

/// Mean next-token cross entropy on the given batches, through the same loss
/// code used for the teacher.
inline double evaluate_yes_solution(const YesModel& y, const std::vector<lm::TokenBatch>& split) {
  return lm::mean_loss(y.state, y.cfg, split);
}

struct YesConstruction {
  YesModel model;
  std::vector<FitTrace> layers;
  FitTrace head;
};

inline YesConstruction construct_yes(const lm::LmState& teacher, const lm::LmConfig& tcfg,
                                     const PermutationSpec& perm, const TeacherCache& cache,
                                     const YesConfig& yc, Rng& rng) {
  yc.validate();
  YesConstruction out{make_yes_model(teacher, tcfg, perm, yc, rng), {}, {}};
  for (Index l = 1; l <= perm.depth(); ++l) out.layers.push_back(fit_yes_layer(out.model, l, cache, yc));
  out.head = fit_output_head(out.model, cache, yc);
  finalize(out.model);
  return out;
}

struct YesResult {
  std::string name;
  std::vector<double> layer_losses;
  double head_loss = 0.0;
  double train = 0.0;
  std::optional<double> test;
};

/// Fresh YES model per permutation, fitted on the cache and scored on the
/// given splits. Model initialisation is seeded by (seed, epoch, index).
inline std::vector<YesResult> run_yes_suite(const lm::LmState& teacher, const lm::LmConfig& tcfg,
                                            const std::vector<PermutationSpec>& perms,
                                            const TeacherCache& cache, const YesConfig& yc,
                                            const std::vector<lm::TokenBatch>& train_split,
                                            const std::vector<lm::TokenBatch>* test_split = nullptr) {
  for (const auto& p : perms) validate_permutation(p, tcfg.n_layers);
  std::vector<YesResult> out;
  for (std::size_t i = 0; i < perms.size(); ++i) {
    Rng rng = Rng(yc.seed).derive(static_cast<std::uint64_t>(cache.epoch)).derive(i);
    YesConstruction c = construct_yes(teacher, tcfg, perms[i], cache, yc, rng);
    YesResult r;
    r.name = perms[i].name;
    for (const auto& t : c.layers) r.layer_losses.push_back(t.loss);
    r.head_loss = c.head.loss;
    r.train = evaluate_yes_solution(c.model, train_split);
    if (test_split) r.test = evaluate_yes_solution(c.model, *test_split);
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------- series

inline std::vector<double> monotonize(const std::vector<double>& in) {
  std::vector<double> out;
  out.reserve(in.size());
  for (double v : in) out.push_back(out.empty() ? v : std::min(out.back(), v));
  return out;
}

/// Per-series values over monitoring epochs for one evaluation split.
struct BoundSeries {
  std::string split = "train";
  std::map<std::string, std::vector<std::pair<std::int64_t, double>>> series;

  void add(const std::string& name, std::int64_t epoch, double value) {
    series[name].emplace_back(epoch, value);
  }

  std::vector<double> raw(const std::string& name) const {
    std::vector<double> v;
    const auto it = series.find(name);
    if (it != series.end()) {
      for (const auto& [e, x] : it->second) v.push_back(x);
    }
    return v;
  }

  std::vector<double> monotonized(const std::string& name) const { return monotonize(raw(name)); }
};

}  // namespace yesbound::yes
