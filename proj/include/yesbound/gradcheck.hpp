#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <utility>

#include "yesbound/linalg.hpp"

namespace yesbound::linalg {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::pair<Index, Index> worst_coordinate{0, 0};
  double eps = 0.0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

/// Central-difference check of `analytic_grad` against f at x.
/// Per-coordinate error is |a - n| / max(|a|, |n|, 1e-8).
inline GradCheckReport grad_check(const std::function<double(const Mat&)>& f,
                                  const Mat& x, const Mat& analytic_grad,
                                  double eps = 1e-5) {
  if (!(eps > 0.0 && eps <= 1e-2)) {
    fail(ErrorKind::InvalidArgument, "grad_check eps must lie in (0, 1e-2]");
  }
  if (x.rows() != analytic_grad.rows() || x.cols() != analytic_grad.cols()) {
    fail(ErrorKind::InvalidShape, "grad_check: gradient shape " +
                                      shape_str(analytic_grad) + " vs input " +
                                      shape_str(x));
  }
  GradCheckReport report;
  report.eps = eps;
  Mat probe = x;
  for (Index i = 0; i < x.rows(); ++i) {
    for (Index j = 0; j < x.cols(); ++j) {
      const double orig = probe(i, j);
      probe(i, j) = orig + eps;
      const double fp = f(probe);
      probe(i, j) = orig - eps;
      const double fm = f(probe);
      probe(i, j) = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        fail(ErrorKind::NumericalFailure, "grad_check: f is not finite near x");
      }
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic_grad(i, j);
      const double err =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      if (err > report.max_rel_error || (i == 0 && j == 0)) {
        report.max_rel_error = std::max(report.max_rel_error, err);
        report.worst_coordinate = {i, j};
        report.analytic_at_worst = a;
        report.numeric_at_worst = numeric;
      }
    }
  }
  return report;
}

inline GradCheckReport grad_check(const std::function<double(const Matrix&)>& f,
                                  const Matrix& x, const Matrix& analytic_grad,
                                  double eps = 1e-5) {
  return grad_check([&](const Mat& m) { return f(Matrix(m)); }, x.mat(),
                    analytic_grad.mat(), eps);
}

}  // namespace yesbound::linalg
