#pragma once

// Fully connected ReLU network with quantized weights, trained by minibatch
// SGD on the squared Frobenius loss. Samples are stored as columns, so layer k
// computes Y_{k+1} = relu(Q(W_k) Y_k) and the last layer is linear.

#include <cmath>
#include <string>
#include <vector>

#include "yesbound/linalg.hpp"
#include "yesbound/optim.hpp"
#include "yesbound/quant.hpp"
#include "yesbound/rng.hpp"

namespace yesbound::fcnn {

struct FcnnSpec {
  std::vector<Index> layer_widths;  // d_0 (input) ... d_K (output)
  quant::QuantSpec quant{};
  bool bias = false;  // absorbed as an appended constant row on every layer input

  Index depth() const { return static_cast<Index>(layer_widths.size()) - 1; }
  Index width(Index k) const { return layer_widths[static_cast<std::size_t>(k)]; }

  void validate() const {
    if (layer_widths.size() < 2) {
      fail(ErrorKind::InvalidSpec, "an FCNN needs at least one weight layer");
    }
    for (Index w : layer_widths) {
      if (w < 1) fail(ErrorKind::InvalidSpec, "layer widths must be positive");
    }
    quant.validate();
  }
};

struct FcnnState {
  std::vector<Mat> weights;  // latent full precision; W_k is d_k x (d_{k-1} + bias)
};

/// Appends a row of ones (bias absorption).
inline Mat with_bias_row(const Mat& y) {
  Mat out(y.rows() + 1, y.cols());
  out.topRows(y.rows()) = y;
  out.row(y.rows()).setOnes();
  return out;
}

inline Mat layer_input(const Mat& y, bool bias) { return bias ? with_bias_row(y) : y; }

/// He-normal initialisation.
inline FcnnState init_state(const FcnnSpec& spec, Rng& rng) {
  spec.validate();
  FcnnState s;
  for (Index k = 1; k <= spec.depth(); ++k) {
    const Index fan_in = spec.width(k - 1) + (spec.bias ? 1 : 0);
    s.weights.push_back(
        rng.normal_matrix(spec.width(k), fan_in, std::sqrt(2.0 / static_cast<double>(fan_in))));
  }
  return s;
}

inline void check_state(const FcnnSpec& spec, const FcnnState& s) {
  if (static_cast<Index>(s.weights.size()) != spec.depth()) {
    fail(ErrorKind::InvalidShape, "state has " + std::to_string(s.weights.size()) +
                                      " layers, spec expects " + std::to_string(spec.depth()));
  }
  for (Index k = 1; k <= spec.depth(); ++k) {
    const Mat& w = s.weights[static_cast<std::size_t>(k - 1)];
    if (w.rows() != spec.width(k) || w.cols() != spec.width(k - 1) + (spec.bias ? 1 : 0)) {
      fail(ErrorKind::InvalidShape, "layer " + std::to_string(k) + " weight is " +
                                        linalg::shape_str(w));
    }
  }
}

/// Effective weights used in the forward pass.
inline std::vector<Mat> effective_weights(const FcnnSpec& spec, const FcnnState& s,
                                          bool quantized) {
  std::vector<Mat> out;
  out.reserve(s.weights.size());
  for (const Mat& w : s.weights) {
    out.push_back(quantized ? quant::apply(w, spec.quant) : w);
  }
  return out;
}

/// Returns Y_1 = X, Y_2, ..., Y_{K+1} (unaugmented).
inline std::vector<Mat> forward_with(const FcnnSpec& spec, const std::vector<Mat>& weights,
                                     const Mat& x) {
  if (x.rows() != spec.width(0)) {
    fail(ErrorKind::InvalidShape, "input has " + std::to_string(x.rows()) + " rows, expected " +
                                      std::to_string(spec.width(0)));
  }
  std::vector<Mat> acts;
  acts.reserve(weights.size() + 1);
  acts.push_back(x);
  const Index depth = spec.depth();
  for (Index k = 1; k <= depth; ++k) {
    Mat z = weights[static_cast<std::size_t>(k - 1)] * layer_input(acts.back(), spec.bias);
    acts.push_back(k < depth ? linalg::relu(z) : std::move(z));
  }
  return acts;
}

inline std::vector<Mat> forward(const FcnnSpec& spec, const FcnnState& s, const Mat& x,
                                bool quantized) {
  check_state(spec, s);
  return forward_with(spec, effective_weights(spec, s, quantized), x);
}

inline double loss(const FcnnSpec& spec, const FcnnState& s, const Mat& x, const Mat& y) {
  const auto acts = forward(spec, s, x, true);
  return linalg::frob2(y - acts.back());
}

/// Gradient of ||Y - f(X)||_F^2 w.r.t. the latent weights (STE through Q).
inline std::vector<Mat> gradients(const FcnnSpec& spec, const FcnnState& s, const Mat& x,
                                  const Mat& y, double* loss_out = nullptr) {
  const std::vector<Mat> w = effective_weights(spec, s, true);
  const std::vector<Mat> acts = forward_with(spec, w, x);
  const Index depth = spec.depth();
  Mat delta = -2.0 * (y - acts.back());
  if (loss_out) *loss_out = linalg::frob2(y - acts.back());
  std::vector<Mat> grads(static_cast<std::size_t>(depth));
  for (Index k = depth; k >= 1; --k) {
    const auto ku = static_cast<std::size_t>(k - 1);
    if (k < depth) {
      // relu'(z) = 1 where the activation is positive
      delta = delta.cwiseProduct((acts[ku + 1].array() > 0.0).cast<double>().matrix());
    }
    const Mat in = layer_input(acts[ku], spec.bias);
    grads[ku] = quant::ste_grad(delta * in.transpose());
    if (k > 1) {
      Mat back = w[ku].transpose() * delta;
      delta = spec.bias ? Mat(back.topRows(back.rows() - 1)) : back;
    }
  }
  return grads;
}

/// One pass of minibatch SGD over shuffled columns. Returns the full-set loss
/// of the quantized forward pass after the epoch.
inline double train_epoch(const FcnnSpec& spec, FcnnState& s, const Mat& x, const Mat& y,
                          double lr, Index batch_size, Rng& rng) {
  check_state(spec, s);
  if (lr < 0.0) fail(ErrorKind::InvalidArgument, "learning rate must be non-negative");
  if (x.cols() != y.cols()) fail(ErrorKind::InvalidShape, "X and Y sample counts differ");
  if (batch_size < 1) fail(ErrorKind::InvalidArgument, "batch size must be >= 1");
  const Index n = x.cols();
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order);
  for (Index start = 0; start < n; start += batch_size) {
    const Index len = std::min(batch_size, n - start);
    Mat xb(x.rows(), len);
    Mat yb(y.rows(), len);
    for (Index c = 0; c < len; ++c) {
      const Index src = order[static_cast<std::size_t>(start + c)];
      xb.col(c) = x.col(src);
      yb.col(c) = y.col(src);
    }
    const auto grads = gradients(spec, s, xb, yb);
    for (std::size_t k = 0; k < grads.size(); ++k) optim::sgd_step(s.weights[k], grads[k], lr);
  }
  const double l = loss(spec, s, x, y);
  if (!std::isfinite(l)) {
    fail(ErrorKind::NumericalFailure, "training loss is not finite (lr=" + std::to_string(lr) + ")");
  }
  return l;
}

}  // namespace yesbound::fcnn
