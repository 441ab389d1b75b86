#pragma once

// Weight quantizers (global/channel-wise binary, ternary) and the exhaustive
// binary least-squares oracle used to audit the closed-form solvers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "yesbound/linalg.hpp"

namespace yesbound::quant {

enum class Scheme { None, BinaryGlobal, BinaryChannelwise, Ternary };

inline const char* to_string(Scheme s) {
  switch (s) {
    case Scheme::None: return "none";
    case Scheme::BinaryGlobal: return "binary";
    case Scheme::BinaryChannelwise: return "binary_channelwise";
    case Scheme::Ternary: return "ternary";
  }
  return "none";
}

inline Scheme scheme_from_string(const std::string& s) {
  if (s == "none") return Scheme::None;
  if (s == "binary" || s == "binary_global") return Scheme::BinaryGlobal;
  if (s == "binary_channelwise" || s == "channelwise") return Scheme::BinaryChannelwise;
  if (s == "ternary") return Scheme::Ternary;
  fail(ErrorKind::InvalidSpec, "unknown quantization scheme '" + s + "'");
}

struct QuantSpec {
  Scheme scheme = Scheme::None;
  double lambda = 1.0;  // BinaryGlobal only
  int zero_sign = +1;   // sign(0)

  void validate() const {
    if (scheme == Scheme::BinaryGlobal && !(lambda > 0.0)) {
      fail(ErrorKind::InvalidSpec, "binary quantization needs lambda > 0");
    }
    if (zero_sign != 1 && zero_sign != -1) {
      fail(ErrorKind::InvalidSpec, "zero_sign must be +1 or -1");
    }
  }
  bool enabled() const noexcept { return scheme != Scheme::None; }
  friend bool operator==(const QuantSpec&, const QuantSpec&) = default;
};

struct QuantizedMatrix {
  Matrix values;
  Mat codes;                  // entries in {-1, 0, +1}
  QuantSpec spec;
  std::vector<double> scales;  // per row; empty for BinaryGlobal
};

inline double sign_of(double v, int zero_sign) {
  if (v > 0.0) return 1.0;
  if (v < 0.0) return -1.0;
  return static_cast<double>(zero_sign);
}

inline Mat sign(const Mat& w, int zero_sign = +1) {
  return w.unaryExpr([zero_sign](double v) { return sign_of(v, zero_sign); });
}

inline QuantizedMatrix binarize(const Mat& w, double lambda, int zero_sign = +1) {
  QuantSpec spec{Scheme::BinaryGlobal, lambda, zero_sign};
  spec.validate();
  Mat codes = sign(w, zero_sign);
  Mat values = lambda * codes;
  return {Matrix(std::move(values)), std::move(codes), spec, {}};
}

inline QuantizedMatrix binarize(const Matrix& w, double lambda, int zero_sign = +1) {
  return binarize(w.mat(), lambda, zero_sign);
}

/// Row scale = mean |row|; a zero row quantizes to zeros.
inline QuantizedMatrix binarize_channelwise(const Mat& w, int zero_sign = +1) {
  if (w.cols() < 1) fail(ErrorKind::InvalidShape, "channel-wise binarize needs >= 1 column");
  QuantSpec spec{Scheme::BinaryChannelwise, 1.0, zero_sign};
  spec.validate();
  Mat codes = sign(w, zero_sign);
  Mat values(w.rows(), w.cols());
  std::vector<double> scales(static_cast<std::size_t>(w.rows()));
  for (Index i = 0; i < w.rows(); ++i) {
    const auto a = w.row(i).cwiseAbs();
    // an already binarized row keeps its scale bit-for-bit
    const double s = a.minCoeff() == a.maxCoeff() ? a.maxCoeff() : a.sum() / static_cast<double>(w.cols());
    scales[static_cast<std::size_t>(i)] = s;
    values.row(i) = s * codes.row(i);
  }
  return {Matrix(std::move(values)), std::move(codes), spec, std::move(scales)};
}

inline QuantizedMatrix binarize_channelwise(const Matrix& w, int zero_sign = +1) {
  return binarize_channelwise(w.mat(), zero_sign);
}

/// Ternary rounding against fixed per-row scales.
inline QuantizedMatrix ternarize_with_scales(const Mat& w, const std::vector<double>& scales) {
  if (static_cast<Index>(scales.size()) != w.rows()) {
    fail(ErrorKind::InvalidShape, "ternarize: one scale per row required");
  }
  Mat codes(w.rows(), w.cols());
  Mat values(w.rows(), w.cols());
  for (Index i = 0; i < w.rows(); ++i) {
    const double g = scales[static_cast<std::size_t>(i)];
    for (Index j = 0; j < w.cols(); ++j) {
      const double c = std::clamp(std::round(w(i, j) / g), -1.0, 1.0);
      codes(i, j) = c;
      values(i, j) = g * c;
    }
  }
  return {Matrix(std::move(values)), std::move(codes), QuantSpec{Scheme::Ternary, 1.0, 1},
          scales};
}

/// Absmean ternary: gamma_i = mean |row i| + 1e-12, codes = clip(round(w/gamma), -1, 1).
inline QuantizedMatrix ternarize(const Mat& w) {
  if (w.size() == 0) fail(ErrorKind::InvalidShape, "ternarize of empty matrix");
  std::vector<double> scales(static_cast<std::size_t>(w.rows()));
  for (Index i = 0; i < w.rows(); ++i) {
    scales[static_cast<std::size_t>(i)] =
        w.row(i).cwiseAbs().sum() / static_cast<double>(w.cols()) + 1e-12;
  }
  return ternarize_with_scales(w, scales);
}

inline QuantizedMatrix ternarize(const Matrix& w) { return ternarize(w.mat()); }

inline QuantizedMatrix quantize(const Mat& w, const QuantSpec& spec) {
  switch (spec.scheme) {
    case Scheme::BinaryGlobal: return binarize(w, spec.lambda, spec.zero_sign);
    case Scheme::BinaryChannelwise: return binarize_channelwise(w, spec.zero_sign);
    case Scheme::Ternary: return ternarize(w);
    case Scheme::None: break;
  }
  return {Matrix(w), Mat(), spec, {}};
}

/// Quantized values only; identity when the scheme is None.
inline Mat apply(const Mat& w, const QuantSpec& spec) {
  if (!spec.enabled()) return w;
  return quantize(w, spec).values.mat();
}

/// Straight-through estimator: the quantizer is the identity on the way back.
inline Mat ste_grad(const Mat& upstream) { return upstream; }

inline constexpr Index kBruteForceMaxEntries = 20;

/// Exact minimiser of ||Y - W Yk||_F^2 over W with entries in {-lambda, lambda},
/// by enumerating all 2^(m*r) sign patterns. Ties keep the first pattern found.
inline std::pair<QuantizedMatrix, double> brute_force_binary_minimizer(const Mat& y,
                                                                       const Mat& yk,
                                                                       double lambda) {
  if (!(lambda > 0.0)) fail(ErrorKind::InvalidSpec, "lambda must be positive");
  if (y.cols() != yk.cols()) {
    fail(ErrorKind::InvalidShape, "brute force: Y " + linalg::shape_str(y) + " vs Yk " +
                                      linalg::shape_str(yk));
  }
  const Index m = y.rows();
  const Index r = yk.rows();
  const Index n = m * r;
  if (n > kBruteForceMaxEntries) {
    fail(ErrorKind::TooLarge, "enumeration over " + std::to_string(n) + " entries exceeds " +
                                  std::to_string(kBruteForceMaxEntries));
  }
  Mat w(m, r);
  Mat best_w;
  double best = std::numeric_limits<double>::infinity();
  const std::uint64_t total = std::uint64_t{1} << n;
  for (std::uint64_t pattern = 0; pattern < total; ++pattern) {
    for (Index e = 0; e < n; ++e) {
      w.data()[e] = ((pattern >> e) & 1U) ? -lambda : lambda;
    }
    const double loss = linalg::residual_loss(y, w, yk);
    if (loss < best) {
      best = loss;
      best_w = w;
    }
  }
  QuantizedMatrix q{Matrix(best_w), sign(best_w), QuantSpec{Scheme::BinaryGlobal, lambda, 1}, {}};
  return {std::move(q), best};
}

}  // namespace yesbound::quant
