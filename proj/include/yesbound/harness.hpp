#pragma once

// Training loops that produce the teacher trajectories, with periodic
// monitoring (train/test evaluation plus the reference-bound suites),
// checkpointing and resume.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "yesbound/bound_cloud.hpp"
#include "yesbound/checkpoint.hpp"
#include "yesbound/data.hpp"
#include "yesbound/fcnn.hpp"
#include "yesbound/fcnn_yes.hpp"
#include "yesbound/lm/model.hpp"
#include "yesbound/metrics.hpp"
#include "yesbound/optim.hpp"
#include "yesbound/yes_lm.hpp"

namespace yesbound::harness {

// ---------------------------------------------------------------- evaluation

inline double evaluate_split(const lm::LmState& st, const lm::LmConfig& cfg,
                             const std::vector<lm::TokenBatch>& split) {
  return lm::mean_loss(st, cfg, split);
}

inline double evaluate_split(const fcnn::FcnnSpec& spec, const fcnn::FcnnState& s, const Mat& x,
                             const Mat& y) {
  if (x.cols() == 0) fail(ErrorKind::InvalidArgument, "evaluation split is empty");
  return fcnn::loss(spec, s, x, y);
}

// ---------------------------------------------------------------- language model

struct LmRunConfig {
  lm::LmConfig model;
  optim::OptimizerConfig optimizer;
  std::int64_t epochs = 1;
  Index batch_size = 8;
  Index grad_accum_steps = 1;
  std::int64_t monitor_every = 1;
  std::uint64_t seed = 0;
  std::vector<yes::PermutationSpec> suite;
  yes::YesConfig yes;
  Index cache_size = 0;    // 0: same as batch_size
  Index eval_windows = 0;  // windows of each split used for evaluation, 0: all
  bool eval_test = false;
  std::int64_t checkpoint_every = 0;  // 0: no checkpoints
  std::filesystem::path checkpoint_dir;
  std::uint64_t config_hash = 0;

  Index effective_cache() const { return cache_size > 0 ? cache_size : batch_size; }

  void validate() const {
    model.validate();
    optimizer.validate();
    yes.validate();
    if (epochs < 0) fail(ErrorKind::InvalidSpec, "epochs must be >= 0");
    if (batch_size < 1) fail(ErrorKind::InvalidSpec, "batch_size must be >= 1");
    if (grad_accum_steps < 1) fail(ErrorKind::InvalidSpec, "grad_accum_steps must be >= 1");
    if (monitor_every < 1) fail(ErrorKind::InvalidSpec, "monitor_every must be >= 1");
    if (checkpoint_every < 0) fail(ErrorKind::InvalidSpec, "checkpoint_every must be >= 0");
    for (const auto& p : suite) yes::validate_permutation(p, model.n_layers);
  }
};

struct LmRunResult {
  lm::LmState state;
  std::vector<double> epoch_loss;  // token-weighted mean step loss of epochs 1..E
  std::vector<std::int64_t> monitor_epochs;
  yes::BoundSeries train_series{"train", {}};
  yes::BoundSeries test_series{"test", {}};
  std::int64_t steps = 0;
};

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::int64_t epoch) {
  char name[32];
  std::snprintf(name, sizeof name, "epoch_%06lld.ckpt", static_cast<long long>(epoch));
  return dir / name;
}

/// One optimizer step over a group of micro-batches; each micro-batch
/// gradient is weighted by its share of the group's tokens. Returns the
/// token-weighted mean loss before the update.
inline double accumulated_step(lm::LmState& st, const lm::LmConfig& cfg, optim::Optimizer& opt,
                               const std::vector<lm::TokenBatch>& micro, double lr) {
  double total = 0.0;
  for (const auto& b : micro) total += static_cast<double>(b.tokens());
  lm::LmState g = lm::zeros_like(st);
  double loss = 0.0;
  for (const auto& b : micro) {
    const double w = static_cast<double>(b.tokens()) / total;
    loss += w * lm::loss_and_grad(st, cfg, b, g, w);
  }
  if (!std::isfinite(loss)) fail(ErrorKind::NumericalFailure, "training loss is not finite");
  opt.step(st.tensors(), std::as_const(g).tensors(), lr);
  return loss;
}

inline double train_lm_epoch(lm::LmState& st, const LmRunConfig& rc, optim::Optimizer& opt,
                             const data::TokenIds& train, std::int64_t epoch, std::int64_t* steps) {
  const auto bl = data::batches(train, rc.batch_size, rc.model.context_len, rc.seed, epoch);
  const double lr = optim::lr_at(epoch - 1, rc.optimizer);
  double sum = 0.0;
  double tokens = 0.0;
  const auto accum = static_cast<std::size_t>(rc.grad_accum_steps);
  for (std::size_t s = 0; s < bl.size(); s += accum) {
    std::vector<lm::TokenBatch> micro(bl.begin() + static_cast<std::ptrdiff_t>(s),
                                      bl.begin() + static_cast<std::ptrdiff_t>(std::min(bl.size(), s + accum)));
    double n = 0.0;
    for (const auto& b : micro) n += static_cast<double>(b.tokens());
    sum += n * accumulated_step(st, rc.model, opt, micro, lr);
    tokens += n;
    if (steps) ++*steps;
  }
  return sum / tokens;
}

/// Trains from `init` (or a fresh seeded model), or continues from `resume`.
/// Monitoring epochs are 0 and every multiple of monitor_every: the train
/// split (and optionally test) is evaluated and the YES suite is fitted on a
/// cache of the first cache_size windows of that epoch's order.
inline LmRunResult train_lm(const data::TokenCorpus& corpus, const LmRunConfig& rc,
                            metrics::Sink* sink, const ckpt::Checkpoint* resume = nullptr,
                            const lm::LmState* init = nullptr) {
  rc.validate();
  const lm::LmConfig& cfg = rc.model;
  LmRunResult res;
  Rng init_rng(rc.seed);
  res.state = init ? *init : lm::init_lm(cfg, init_rng);
  optim::Optimizer opt(rc.optimizer);
  std::int64_t start = 1;
  if (resume) {
    if (resume->config_hash != rc.config_hash) {
      fail(ErrorKind::InvalidSpec, "checkpoint was written by a different configuration");
    }
    ckpt::unpack_lm(*resume, res.state, &opt);
    const auto meta = nlohmann::json::parse(resume->meta.empty() ? "{}" : resume->meta);
    if (meta.contains("epoch_loss")) res.epoch_loss = meta["epoch_loss"].get<std::vector<double>>();
    if (meta.contains("steps")) res.steps = meta["steps"].get<std::int64_t>();
    if (sink && meta.contains("monotone")) sink->monotonizer().from_json(meta["monotone"]);
    start = static_cast<std::int64_t>(resume->epoch) + 1;
  }

  const auto train_eval = data::sequential_batches(corpus.train, rc.batch_size, cfg.context_len, rc.eval_windows);
  std::vector<lm::TokenBatch> test_eval;
  if (rc.eval_test) {
    test_eval = data::sequential_batches(corpus.test, rc.batch_size, cfg.context_len, rc.eval_windows);
  }

  auto monitor = [&](std::int64_t e) {
    res.monitor_epochs.push_back(e);
    const double tr = evaluate_split(res.state, cfg, train_eval);
    res.train_series.add("train", e, tr);
    if (sink) sink->record(e, "train", "train", tr);
    if (rc.eval_test) {
      const double te = evaluate_split(res.state, cfg, test_eval);
      res.test_series.add("train", e, te);
      if (sink) sink->record(e, "train", "test", te);
    }
    if (!rc.suite.empty()) {
      const auto cache_batch =
          data::batches(corpus.train, rc.effective_cache(), cfg.context_len, rc.seed, e).front();
      const auto cache = yes::cache_teacher(res.state, cfg, cache_batch, e);
      yes::YesConfig yc = rc.yes;
      yc.seed = rc.seed;
      const auto results = yes::run_yes_suite(res.state, cfg, rc.suite, cache, yc, train_eval,
                                              rc.eval_test ? &test_eval : nullptr);
      for (const auto& r : results) {
        res.train_series.add(r.name, e, r.train);
        if (sink) sink->record(e, r.name, "train", r.train);
        if (r.test) {
          res.test_series.add(r.name, e, *r.test);
          if (sink) sink->record(e, r.name, "test", *r.test);
        }
      }
    }
    if (sink) sink->flush();
  };

  auto save = [&](std::int64_t e) {
    if (rc.checkpoint_every <= 0 || rc.checkpoint_dir.empty()) return;
    if (e % rc.checkpoint_every != 0 && e != rc.epochs) return;
    ckpt::Checkpoint c;
    c.epoch = static_cast<std::uint64_t>(e);
    c.config_hash = rc.config_hash;
    c.rng_seed = rc.seed;
    c.rng_counter = static_cast<std::uint64_t>(e);
    nlohmann::json meta{{"epoch_loss", res.epoch_loss}, {"steps", res.steps}};
    meta["monotone"] = sink ? sink->monotonizer().to_json() : nlohmann::json::array();
    c.meta = meta.dump();
    ckpt::pack_lm(c, res.state, &opt);
    std::error_code ec;
    std::filesystem::create_directories(rc.checkpoint_dir, ec);
    if (ec) fail(ErrorKind::IoError, "cannot create " + rc.checkpoint_dir.string());
    ckpt::save(checkpoint_path(rc.checkpoint_dir, e), c);
    ckpt::save(rc.checkpoint_dir / "last.ckpt", c);
  };

  if (!resume) {
    monitor(0);
    save(0);
  }
  for (std::int64_t e = start; e <= rc.epochs; ++e) {
    res.epoch_loss.push_back(train_lm_epoch(res.state, rc, opt, corpus.train, e, &res.steps));
    if (e % rc.monitor_every == 0) monitor(e);
    save(e);
  }
  return res;
}

// ---------------------------------------------------------------- FCNN

struct FcnnRunConfig {
  fcnn::FcnnSpec spec;
  optim::OptimizerConfig optimizer;  // SGD with optional step decay
  std::int64_t epochs = 1;
  Index batch_size = 1000;
  std::int64_t monitor_every = 1;
  std::uint64_t seed = 0;
  fcnn::YesOptions yes;
  bool yesk = true;

  void validate() const {
    spec.validate();
    optimizer.validate();
    if (optimizer.kind != optim::Kind::SGD) fail(ErrorKind::InvalidSpec, "FCNN runs use SGD");
    if (epochs < 0) fail(ErrorKind::InvalidSpec, "epochs must be >= 0");
    if (batch_size < 1) fail(ErrorKind::InvalidSpec, "batch_size must be >= 1");
    if (monitor_every < 1) fail(ErrorKind::InvalidSpec, "monitor_every must be >= 1");
  }
};

struct FcnnRunResult {
  fcnn::FcnnState state;
  std::vector<double> epoch_loss;
  std::vector<fcnn::BoundPoint> points;
  fcnn::StairSeries stairs;
};

/// `x` is d_0 x n and `y` is d_K x n (samples as columns).
inline FcnnRunResult train_fcnn(const Mat& x, const Mat& y, const FcnnRunConfig& rc,
                                metrics::Sink* sink) {
  rc.validate();
  const fcnn::FcnnSpec& spec = rc.spec;
  if (x.rows() != spec.width(0) || y.rows() != spec.width(spec.depth()) || x.cols() != y.cols()) {
    fail(ErrorKind::InvalidShape, "data shapes do not match the network");
  }
  FcnnRunResult res;
  Rng init_rng(rc.seed);
  res.state = fcnn::init_state(spec, init_rng);
  const fcnn::InputPinv cached = fcnn::make_input_pinv(spec, x);
  const double yes0 = fcnn::yes0_bound(spec, x, y, rc.yes, &cached).loss;

  auto monitor = [&](std::int64_t e) {
    fcnn::BoundPoint p;
    p.epoch = e;
    p.train = evaluate_split(spec, res.state, x, y);
    p.yes0 = yes0;
    if (rc.yesk && spec.depth() >= 2) {
      // j = 1 routes nothing through the teacher and reproduces YES-0.
      const auto acts = fcnn::forward(spec, res.state, x, true);
      double best = yes0;
      p.yes_j.push_back(yes0);
      for (Index j = 2; j <= spec.depth() - 1; ++j) {
        const double l = fcnn::yesk_bound(spec, x, y, acts, j, rc.yes, &cached).loss;
        p.yes_j.push_back(l);
        best = std::min(best, l);
      }
      p.yesk = best;
    }
    res.points.push_back(p);
    res.stairs = fcnn::bound_cloud(res.points);
    if (sink) {
      sink->record(e, "train", "train", p.train);
      sink->record(e, "YES-0", "train", p.yes0);
      if (p.yesk) sink->record(e, "YES-k", "train", *p.yesk);
      sink->record(e, "stair", "train", res.stairs.active_value.back());
      sink->flush();
    }
  };

  monitor(0);
  for (std::int64_t e = 1; e <= rc.epochs; ++e) {
    Rng rng = Rng(rc.seed).derive(static_cast<std::uint64_t>(e));
    const double lr = optim::lr_at(e - 1, rc.optimizer);
    res.epoch_loss.push_back(fcnn::train_epoch(spec, res.state, x, y, lr, rc.batch_size, rng));
    if (e % rc.monitor_every == 0) monitor(e);
  }
  return res;
}

}  // namespace yesbound::harness
