#pragma once

// Dense real matrices and the Moore-Penrose pseudoinverse.

#include <Eigen/Core>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "yesbound/error.hpp"

namespace yesbound {

using Index = Eigen::Index;
/// Row-major dense storage used by every module.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

namespace linalg {

inline bool all_finite(const Mat& m) { return m.allFinite(); }

inline std::string shape_str(const Mat& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

/// Immutable checked matrix. Construction rejects non-finite entries and
/// inconsistent shapes; the underlying storage is exposed read-only through
/// `mat()` so callers can use Eigen expressions directly.
class Matrix {
 public:
  Matrix() = default;

  Matrix(Index rows, Index cols, const std::vector<double>& data) {
    if (rows < 0 || cols < 0 ||
        static_cast<std::size_t>(rows * cols) != data.size()) {
      fail(ErrorKind::InvalidShape,
           "data length " + std::to_string(data.size()) + " does not match " +
               std::to_string(rows) + "x" + std::to_string(cols));
    }
    m_ = Eigen::Map<const Mat>(data.data(), rows, cols);
    check_finite();
  }

  explicit Matrix(Mat m) : m_(std::move(m)) { check_finite(); }

  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const Index r = static_cast<Index>(rows.size());
    const Index c = r == 0 ? 0 : static_cast<Index>(rows.begin()->size());
    m_.resize(r, c);
    Index i = 0;
    for (const auto& row : rows) {
      if (static_cast<Index>(row.size()) != c) {
        fail(ErrorKind::InvalidShape, "ragged initializer list");
      }
      Index j = 0;
      for (double v : row) m_(i, j++) = v;
      ++i;
    }
    check_finite();
  }

  static Matrix identity(Index n) { return Matrix(Mat::Identity(n, n)); }
  static Matrix zeros(Index r, Index c) { return Matrix(Mat::Zero(r, c)); }

  Index rows() const noexcept { return m_.rows(); }
  Index cols() const noexcept { return m_.cols(); }
  Index size() const noexcept { return m_.size(); }
  double operator()(Index i, Index j) const { return m_(i, j); }
  const Mat& mat() const noexcept { return m_; }
  std::vector<double> data() const {
    return std::vector<double>(m_.data(), m_.data() + m_.size());
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() && a.m_ == b.m_;
  }

 private:
  void check_finite() const {
    if (!m_.allFinite()) {
      fail(ErrorKind::NumericalFailure, "matrix contains NaN or Inf");
    }
  }

  Mat m_;
};

/// Relative cutoff under which singular values are treated as zero.
inline constexpr double kPinvRelCutoff = 1e-10;

/// Moore-Penrose pseudoinverse via SVD; singular values below
/// 1e-10 * sigma_max are dropped.
inline Mat pinv(const Mat& m) {
  if (m.rows() < 1 || m.cols() < 1) {
    fail(ErrorKind::InvalidShape, "pinv of empty matrix " + shape_str(m));
  }
  if (!m.allFinite()) {
    fail(ErrorKind::NumericalFailure, "pinv input is not finite");
  }
  Eigen::MatrixXd a = m;
  Eigen::BDCSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& s = svd.singularValues();
  const double cutoff = s.size() > 0 ? kPinvRelCutoff * s(0) : 0.0;
  Eigen::VectorXd inv(s.size());
  for (Index i = 0; i < s.size(); ++i) {
    inv(i) = (s(i) > cutoff && s(i) > 0.0) ? 1.0 / s(i) : 0.0;
  }
  Mat out = svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
  return out;
}

inline Matrix pinv(const Matrix& m) { return Matrix(pinv(m.mat())); }

/// target * pinv(basis): the least-squares map W minimising
/// ||target - W basis||_F.
inline Mat least_squares_project(const Mat& target, const Mat& basis) {
  if (target.cols() != basis.cols()) {
    fail(ErrorKind::InvalidShape, "least_squares_project: target " +
                                      shape_str(target) + " vs basis " +
                                      shape_str(basis));
  }
  return target * pinv(basis);
}

inline Matrix least_squares_project(const Matrix& target, const Matrix& basis) {
  return Matrix(least_squares_project(target.mat(), basis.mat()));
}

/// Squared Frobenius norm.
inline double frob2(const Mat& m) { return m.squaredNorm(); }

/// ||target - w * input||_F^2; every solver scores candidates through this.
inline double residual_loss(const Mat& target, const Mat& w, const Mat& input) {
  Mat pred = w * input;
  return (target - pred).squaredNorm();
}

inline double rel_frob_error(const Mat& a, const Mat& b) {
  const double denom = std::max(b.norm(), 1e-300);
  return (a - b).norm() / denom;
}

inline Mat relu(const Mat& m) { return m.cwiseMax(0.0); }

}  // namespace linalg

using linalg::Matrix;

}  // namespace yesbound
