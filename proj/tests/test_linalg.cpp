#include <cmath>
#include <limits>

#include "test_util.hpp"

using namespace yesbound;
using testutil::error_kind_of;

TEST(Pinv, IdentityIsItsOwnPseudoinverse) {
  const Matrix p = linalg::pinv(Matrix::identity(3));
  EXPECT_LT(testutil::max_abs_diff(p.mat(), Mat::Identity(3, 3)), 1e-14);
}

TEST(Pinv, RankDeficientDiagonal) {
  const Matrix p = linalg::pinv(Matrix{{2.0, 0.0}, {0.0, 0.0}});
  EXPECT_NEAR(p(0, 0), 0.5, 1e-15);
  EXPECT_EQ(p(0, 1), 0.0);
  EXPECT_EQ(p(1, 0), 0.0);
  EXPECT_EQ(p(1, 1), 0.0);
}

TEST(Pinv, MoorePenroseIdentitiesOnWideMatrix) {
  Rng rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    const Mat m = rng.normal_matrix(4, 7);
    const Mat p = linalg::pinv(m);
    ASSERT_EQ(p.rows(), 7);
    ASSERT_EQ(p.cols(), 4);
    EXPECT_LT(testutil::max_abs_diff(m * p * m, m), 1e-8);
    EXPECT_LT(testutil::max_abs_diff(p * m * p, p), 1e-8);
    const Mat mp = m * p;
    const Mat pm = p * m;
    EXPECT_LT(testutil::max_abs_diff(mp, mp.transpose()), 1e-8);
    EXPECT_LT(testutil::max_abs_diff(pm, pm.transpose()), 1e-8);
  }
}

TEST(Pinv, RejectsEmptyAndNonFinite) {
  EXPECT_EQ(error_kind_of([] { linalg::pinv(Mat(0, 3)); }), ErrorKind::InvalidShape);
  Mat bad = Mat::Ones(2, 2);
  bad(1, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_EQ(error_kind_of([&] { linalg::pinv(bad); }), ErrorKind::NumericalFailure);
}

TEST(MatrixType, ConstructionChecks) {
  EXPECT_EQ(error_kind_of([] { Matrix(2, 2, {1.0, 2.0, 3.0}); }), ErrorKind::InvalidShape);
  EXPECT_EQ(error_kind_of([] { Matrix({{1.0, 2.0}, {3.0}}); }), ErrorKind::InvalidShape);
  EXPECT_EQ(error_kind_of([] { Matrix(1, 1, {std::numeric_limits<double>::infinity()}); }),
            ErrorKind::NumericalFailure);
  const Matrix m(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(m(1, 0), 4.0);
  EXPECT_EQ(m.data().size(), 6U);
}

TEST(LeastSquares, IdentityBasis) {
  const Matrix w = linalg::least_squares_project(Matrix::identity(2), Matrix::identity(2));
  EXPECT_LT(testutil::max_abs_diff(w.mat(), Mat::Identity(2, 2)), 1e-14);
}

TEST(LeastSquares, ScaledInvertibleBasis) {
  const Mat b = (Mat(2, 2) << 2.0, 1.0, 1.0, 3.0).finished();
  const Mat w = linalg::least_squares_project(2.0 * b, b);
  EXPECT_LT(testutil::max_abs_diff(w, 2.0 * Mat::Identity(2, 2)), 1e-12);
}

TEST(LeastSquares, BeatsRandomCandidates) {
  Rng rng(5);
  const Mat target = rng.normal_matrix(3, 5);
  const Mat basis = rng.normal_matrix(4, 5);
  const Mat w = linalg::least_squares_project(target, basis);
  const double best = linalg::residual_loss(target, w, basis);
  for (int i = 0; i < 100; ++i) {
    const Mat cand = rng.normal_matrix(3, 4);
    EXPECT_LE(best, linalg::residual_loss(target, cand, basis) + 1e-12);
  }
  // Perturbations of the optimum never help either.
  for (int i = 0; i < 20; ++i) {
    const Mat cand = w + 1e-3 * rng.normal_matrix(3, 4);
    EXPECT_LE(best, linalg::residual_loss(target, cand, basis) + 1e-12);
  }
}

TEST(LeastSquares, ShapeMismatch) {
  EXPECT_EQ(error_kind_of([] { linalg::least_squares_project(Mat::Ones(2, 3), Mat::Ones(2, 4)); }),
            ErrorKind::InvalidShape);
}

TEST(GradCheck, Quadratic) {
  const Mat x = (Mat(1, 2) << 1.0, 2.0).finished();
  const Mat g = (Mat(1, 2) << 2.0, 4.0).finished();
  const auto r = linalg::grad_check([](const Mat& v) { return v.squaredNorm(); }, x, g, 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(GradCheck, ReluAwayFromKink) {
  const Matrix x{{1.0, -1.0}};
  const Matrix g{{1.0, 0.0}};
  const auto r = linalg::grad_check(
      [](const Matrix& v) { return linalg::relu(v.mat()).sum(); }, x, g, 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(GradCheck, ReportsWrongGradient) {
  const Mat x = (Mat(1, 2) << 1.0, 2.0).finished();
  const Mat g = (Mat(1, 2) << 2.0, 5.0).finished();
  const auto r = linalg::grad_check([](const Mat& v) { return v.squaredNorm(); }, x, g);
  EXPECT_NEAR(r.max_rel_error, 0.2, 1e-6);
  EXPECT_EQ(r.worst_coordinate, (std::pair<Index, Index>{0, 1}));
}

TEST(GradCheck, ArgumentValidation) {
  const Mat x = Mat::Ones(1, 2);
  auto f = [](const Mat& v) { return v.sum(); };
  EXPECT_EQ(error_kind_of([&] { linalg::grad_check(f, x, Mat::Ones(2, 1)); }), ErrorKind::InvalidShape);
  EXPECT_EQ(error_kind_of([&] { linalg::grad_check(f, x, x, 0.0); }), ErrorKind::InvalidArgument);
  EXPECT_EQ(error_kind_of([&] {
              linalg::grad_check([](const Mat&) { return std::nan(""); }, x, x);
            }),
            ErrorKind::NumericalFailure);
}

TEST(RngStream, DeterministicAndDerivedStreamsDiffer) {
  Rng a(42), b(42);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng c = Rng(42).derive(1);
  Rng d = Rng(42).derive(2);
  EXPECT_NE(c.next_u64(), d.next_u64());
  Rng e(7);
  for (int i = 0; i < 1000; ++i) {
    const double u = e.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LE(std::abs(e.truncated_normal(0.5)), 1.0);
  }
}

TEST(RngStream, NormalMoments) {
  Rng rng(3);
  const Mat m = rng.normal_matrix(200, 100);
  const double mean = m.mean();
  const double var = (m.array() - mean).square().mean();
  EXPECT_NEAR(mean, 0.0, 0.02);
  EXPECT_NEAR(var, 1.0, 0.03);
}

TEST(Hash, FnvKnownVectors) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(hex64(0xabcULL), "0000000000000abc");
}
