#pragma once

// Layer-wise reference solutions for quantized ReLU networks.
//
// Every layer k is fitted in closed form, W_k = Q(T_k pinv(Y_k)), where Y_k is
// the layer input produced by the already-fitted layers and T_k is the target
// the layer is steered towards: the final output Y (YES-0), or an intermediate
// activation of the trained network for the first j-1 layers (YES-k). The
// result is scored with the same squared Frobenius loss used in training.

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "yesbound/fcnn.hpp"
#include "yesbound/linalg.hpp"
#include "yesbound/quant.hpp"

namespace yesbound::fcnn {

struct SolverConfig {
  std::optional<double> alpha;  // unset: 1e-3 / ||Y_K||_F^2
  Index iterations = 100;
  bool apply_quant_every_step = true;
  double tolerance = 1e-8;  // loss-change stop for the ReLU refinement
};

inline constexpr double kDivergenceLoss = 1e12;

inline double default_alpha(const Mat& yk) {
  const double n2 = linalg::frob2(yk);
  return n2 > 0.0 ? 1e-3 / n2 : 0.0;
}

inline double resolve_alpha(const SolverConfig& cfg, const Mat& yk) {
  const double a = cfg.alpha ? *cfg.alpha : default_alpha(yk);
  if (a < 0.0) fail(ErrorKind::InvalidArgument, "step size must be non-negative");
  return a;
}

inline void check_divergence(double loss, const char* who) {
  if (!std::isfinite(loss) || loss > kDivergenceLoss) {
    fail(ErrorKind::NumericalFailure, std::string(who) + ": iterates diverged (loss " +
                                          std::to_string(loss) + ")");
  }
}

/// lambda * sign(Y pinv(Yk*)).
inline quant::QuantizedMatrix solve_last_layer_proximal(const Mat& y, const Mat& yk_star,
                                                        double lambda, int zero_sign = +1) {
  return quant::binarize(linalg::least_squares_project(y, yk_star), lambda, zero_sign);
}

using Quantizer = std::function<Mat(const Mat&)>;

/// W <- Q(W + alpha (Y - W Yk) Yk^T) from the given initializer; returns the
/// lowest-loss iterate seen (the initializer included).
inline Mat iterate_quantized_last_layer(const Mat& y, const Mat& yk, const Mat& init,
                                        const Quantizer& q, const SolverConfig& cfg) {
  if (!cfg.apply_quant_every_step) {
    fail(ErrorKind::InvalidArgument,
         "the last-layer iterative solver quantizes at every step");
  }
  if (cfg.iterations < 1) fail(ErrorKind::InvalidArgument, "iterations must be >= 1");
  const double alpha = resolve_alpha(cfg, yk);
  Mat w = init;
  Mat best = w;
  double best_loss = linalg::residual_loss(y, w, yk);
  check_divergence(best_loss, "iterative last-layer solver");
  const Mat ykt = yk.transpose();
  for (Index i = 0; i < cfg.iterations; ++i) {
    Mat resid = y - w * yk;
    w = q(w + alpha * (resid * ykt));
    const double l = linalg::residual_loss(y, w, yk);
    check_divergence(l, "iterative last-layer solver");
    if (l < best_loss) {
      best_loss = l;
      best = w;
    }
  }
  return best;
}

inline quant::QuantizedMatrix solve_last_layer_iterative(const Mat& y, const Mat& yk_star,
                                                         double lambda, const SolverConfig& cfg,
                                                         int zero_sign = +1) {
  const auto init = solve_last_layer_proximal(y, yk_star, lambda, zero_sign);
  const Quantizer q = [&](const Mat& w) {
    return quant::binarize(w, lambda, zero_sign).values.mat();
  };
  Mat best = iterate_quantized_last_layer(y, yk_star, init.values.mat(), q, cfg);
  return quant::binarize(best, lambda, zero_sign);
}

/// Full-precision gradient steps W <- W + alpha (Y - W Yk) Yk^T, exactly
/// cfg.iterations of them. Quantization is left to the caller.
inline Mat refine_linear_first_order(const Mat& w0, const Mat& y, const Mat& yk,
                                     const SolverConfig& cfg,
                                     std::vector<double>* loss_history = nullptr) {
  if (w0.cols() != yk.rows() || w0.rows() != y.rows() || y.cols() != yk.cols()) {
    fail(ErrorKind::InvalidShape, "refine_linear_first_order: incompatible shapes");
  }
  const double alpha = resolve_alpha(cfg, yk);
  Mat w = w0;
  const Mat ykt = yk.transpose();
  if (loss_history) loss_history->push_back(linalg::residual_loss(y, w, yk));
  for (Index i = 0; i < cfg.iterations; ++i) {
    Mat resid = y - w * yk;
    w += alpha * (resid * ykt);
    const double l = linalg::residual_loss(y, w, yk);
    check_divergence(l, "first-order refinement");
    if (loss_history) loss_history->push_back(l);
  }
  return w;
}

inline double relu_layer_loss(const Mat& target, const Mat& w, const Mat& input) {
  return linalg::frob2(target - linalg::relu(w * input));
}

/// Masked pseudo-Newton refinement of a ReLU layer,
///   W <- W + ((T - relu(W Y)) .* [W Y > 0]) pinv(Y),
/// where Y is the input of the layer being refined. Stops when the loss
/// changes by less than cfg.tolerance; returns the lowest-loss iterate.
inline Mat refine_relu_second_order(const Mat& w0, const Mat& target, const Mat& input,
                                    const SolverConfig& cfg, const Mat* input_pinv = nullptr,
                                    std::vector<double>* loss_history = nullptr) {
  if (w0.cols() != input.rows() || w0.rows() != target.rows() ||
      target.cols() != input.cols()) {
    fail(ErrorKind::InvalidShape, "refine_relu_second_order: incompatible shapes");
  }
  const Mat p = input_pinv ? *input_pinv : linalg::pinv(input);
  Mat w = w0;
  double prev = relu_layer_loss(target, w, input);
  check_divergence(prev, "ReLU refinement");
  Mat best = w;
  double best_loss = prev;
  if (loss_history) loss_history->push_back(prev);
  for (Index i = 0; i < cfg.iterations; ++i) {
    const Mat z = w * input;
    const Mat mask = (z.array() > 0.0).cast<double>().matrix();
    const Mat r = (target - linalg::relu(z)).cwiseProduct(mask);
    w += r * p;
    const double l = relu_layer_loss(target, w, input);
    check_divergence(l, "ReLU refinement");
    if (loss_history) loss_history->push_back(l);
    if (l < best_loss) {
      best_loss = l;
      best = w;
    }
    if (std::abs(prev - l) < cfg.tolerance) break;
    prev = l;
  }
  return best;
}

/// Resize a target to `rows` rows by cycling its rows (truncating when the
/// layer is narrower than the target).
inline Mat fit_target_rows(const Mat& target, Index rows) {
  if (target.rows() == rows) return target;
  Mat out(rows, target.cols());
  for (Index i = 0; i < rows; ++i) out.row(i) = target.row(i % target.rows());
  return out;
}

struct YesOptions {
  bool refine = false;               // first/second-order refinement before Q
  SolverConfig refine_cfg{};
  bool last_layer_iterative = false;  // quantize-every-step solver on layer K
  SolverConfig last_layer_cfg{};
};

struct YesSolution {
  std::vector<Mat> weights;      // quantized (or full precision when Q is None)
  std::vector<Mat> activations;  // Y_1 ... Y_{K+1}
  double loss = 0.0;
};

/// Cached pseudoinverse of the (augmented) network input, which every
/// construction on the same data shares.
struct InputPinv {
  Mat x_aug;
  Mat x_pinv;
};

inline InputPinv make_input_pinv(const FcnnSpec& spec, const Mat& x) {
  InputPinv c;
  c.x_aug = layer_input(x, spec.bias);
  c.x_pinv = linalg::pinv(c.x_aug);
  return c;
}

/// Shared layer-by-layer construction: layer k is fitted to
/// fit_target_rows(target_for(k), d_k).
inline YesSolution construct_layerwise(const FcnnSpec& spec, const Mat& x, const Mat& y,
                                       const std::function<const Mat&(Index)>& target_for,
                                       const YesOptions& opts, const InputPinv* cached) {
  spec.validate();
  if (x.rows() != spec.width(0) || y.rows() != spec.width(spec.depth()) ||
      x.cols() != y.cols()) {
    fail(ErrorKind::InvalidShape, "construction data shapes do not match the network");
  }
  const Index depth = spec.depth();
  const Quantizer q = [&](const Mat& w) { return quant::apply(w, spec.quant); };
  YesSolution sol;
  sol.activations.push_back(x);
  for (Index k = 1; k <= depth; ++k) {
    const bool first = (k == 1);
    Mat in_storage;
    const Mat* in = nullptr;
    Mat pinv_storage;
    const Mat* pinv_in = nullptr;
    if (first && cached) {
      in = &cached->x_aug;
      pinv_in = &cached->x_pinv;
    } else {
      in_storage = layer_input(sol.activations.back(), spec.bias);
      in = &in_storage;
      pinv_storage = linalg::pinv(in_storage);
      pinv_in = &pinv_storage;
    }
    const Mat target = fit_target_rows(target_for(k), spec.width(k));
    Mat w_fp = target * (*pinv_in);
    Mat w;
    if (k < depth) {
      if (opts.refine) w_fp = refine_relu_second_order(w_fp, target, *in, opts.refine_cfg, pinv_in);
      w = q(w_fp);
      sol.activations.push_back(linalg::relu(w * (*in)));
    } else {
      if (opts.refine) w_fp = refine_linear_first_order(w_fp, target, *in, opts.refine_cfg);
      w = q(w_fp);
      if (opts.last_layer_iterative && spec.quant.enabled()) {
        w = iterate_quantized_last_layer(target, *in, w, q, opts.last_layer_cfg);
      }
      sol.activations.push_back(w * (*in));
    }
    sol.weights.push_back(std::move(w));
  }
  sol.loss = linalg::frob2(y - sol.activations.back());
  return sol;
}

/// Every layer projects its input straight onto the final output Y.
inline YesSolution yes0_bound(const FcnnSpec& spec, const Mat& x, const Mat& y,
                              const YesOptions& opts = {}, const InputPinv* cached = nullptr) {
  return construct_layerwise(spec, x, y, [&](Index) -> const Mat& { return y; }, opts, cached);
}

/// Layers 1..j-1 project onto the trained network's activation Y_j* (input of
/// layer j); the remaining layers project onto Y. `teacher_acts` holds
/// Y_1* = X, ..., Y_{K+1}* from the trained model's forward pass.
inline YesSolution yesk_bound(const FcnnSpec& spec, const Mat& x, const Mat& y,
                              const std::vector<Mat>& teacher_acts, Index j,
                              const YesOptions& opts = {}, const InputPinv* cached = nullptr) {
  const Index depth = spec.depth();
  if (j < 1 || j > depth - 1) {
    fail(ErrorKind::InvalidArgument, "intermediate layer j=" + std::to_string(j) +
                                         " outside [1, " + std::to_string(depth - 1) + "]");
  }
  if (static_cast<Index>(teacher_acts.size()) < j) {
    fail(ErrorKind::InvalidArgument, "missing teacher activation Y_" + std::to_string(j));
  }
  const Mat& yj = teacher_acts[static_cast<std::size_t>(j - 1)];
  if (yj.cols() != x.cols()) fail(ErrorKind::InvalidShape, "teacher activation sample count");
  return construct_layerwise(
      spec, x, y, [&](Index k) -> const Mat& { return k <= j - 1 ? yj : y; }, opts, cached);
}

struct YeskSummary {
  std::vector<double> per_j;  // index j-1
  Index best_j = 0;
  double best = std::numeric_limits<double>::infinity();
};

/// min over j in [K-1] of the YES-k loss; empty when K < 2.
inline YeskSummary yesk_min(const FcnnSpec& spec, const Mat& x, const Mat& y,
                            const std::vector<Mat>& teacher_acts, const YesOptions& opts = {},
                            const InputPinv* cached = nullptr) {
  YeskSummary s;
  for (Index j = 1; j <= spec.depth() - 1; ++j) {
    const double l = yesk_bound(spec, x, y, teacher_acts, j, opts, cached).loss;
    s.per_j.push_back(l);
    if (l < s.best) {
      s.best = l;
      s.best_j = j;
    }
  }
  return s;
}

}  // namespace yesbound::fcnn
