#pragma once

// SGD / AdamW updates and step-decay learning-rate schedules.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "yesbound/linalg.hpp"

namespace yesbound::optim {

enum class Kind { SGD, AdamW };

inline Kind kind_from_string(const std::string& s) {
  if (s == "sgd" || s == "SGD") return Kind::SGD;
  if (s == "adamw" || s == "AdamW") return Kind::AdamW;
  fail(ErrorKind::InvalidSpec, "unknown optimizer '" + s + "'");
}

inline const char* to_string(Kind k) { return k == Kind::SGD ? "sgd" : "adamw"; }

struct StepDecay {
  double factor = 1.0;
  std::int64_t every_n_epochs = 1;
};

struct OptimizerConfig {
  Kind kind = Kind::SGD;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  bool has_schedule = false;
  StepDecay schedule{};

  void validate() const {
    if (!(lr > 0.0)) fail(ErrorKind::InvalidSpec, "learning rate must be positive");
    if (has_schedule) {
      if (!(schedule.factor > 0.0 && schedule.factor <= 1.0)) {
        fail(ErrorKind::InvalidSpec, "decay factor must lie in (0, 1]");
      }
      if (schedule.every_n_epochs < 1) fail(ErrorKind::InvalidSpec, "decay interval must be >= 1");
    }
  }
};

/// eta0 * factor^floor(epoch / every_n).
inline double lr_at(std::int64_t epoch, const OptimizerConfig& cfg) {
  if (epoch < 0) fail(ErrorKind::InvalidArgument, "epoch must be non-negative");
  if (!cfg.has_schedule) return cfg.lr;
  const std::int64_t k = epoch / cfg.schedule.every_n_epochs;
  double lr = cfg.lr;
  for (std::int64_t i = 0; i < k; ++i) lr *= cfg.schedule.factor;
  return lr;
}

inline void check_same_shape(const Mat& a, const Mat& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    fail(ErrorKind::InvalidShape, std::string(what) + ": " + linalg::shape_str(a) + " vs " +
                                      linalg::shape_str(b));
  }
}

/// p <- p - lr * g
inline void sgd_step(Mat& param, const Mat& grad, double lr) {
  check_same_shape(param, grad, "sgd_step");
  param -= lr * grad;
}

struct Moments {
  Mat m;
  Mat v;
};

/// Bias-corrected AdamW with decoupled weight decay; `t` is the 1-based step.
inline void adamw_step(Mat& param, const Mat& grad, Moments& mom, const OptimizerConfig& cfg,
                       double lr, std::int64_t t) {
  check_same_shape(param, grad, "adamw_step");
  if (t < 1) fail(ErrorKind::InvalidArgument, "adamw step index must be >= 1");
  if (mom.m.size() == 0) {
    mom.m = Mat::Zero(param.rows(), param.cols());
    mom.v = Mat::Zero(param.rows(), param.cols());
  }
  mom.m = cfg.beta1 * mom.m + (1.0 - cfg.beta1) * grad;
  mom.v = cfg.beta2 * mom.v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  if (cfg.weight_decay != 0.0) param *= (1.0 - lr * cfg.weight_decay);
  const double eps = cfg.eps;
  param.array() -= lr * ((mom.m.array() / bc1) / ((mom.v.array() / bc2).sqrt() + eps));
}

/// Optimizer state over an ordered list of parameter tensors.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  const OptimizerConfig& config() const noexcept { return cfg_; }
  std::int64_t step_count() const noexcept { return t_; }
  std::vector<Moments>& moments() noexcept { return moments_; }
  const std::vector<Moments>& moments() const noexcept { return moments_; }
  void set_step_count(std::int64_t t) { t_ = t; }

  void step(const std::vector<Mat*>& params, const std::vector<const Mat*>& grads, double lr) {
    if (params.size() != grads.size()) {
      fail(ErrorKind::InvalidShape, "optimizer: params/grads count mismatch");
    }
    ++t_;
    if (cfg_.kind == Kind::SGD) {
      for (std::size_t i = 0; i < params.size(); ++i) sgd_step(*params[i], *grads[i], lr);
      return;
    }
    if (moments_.size() != params.size()) moments_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      adamw_step(*params[i], *grads[i], moments_[i], cfg_, lr, t_);
    }
  }

 private:
  OptimizerConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<Moments> moments_;
};

}  // namespace yesbound::optim
