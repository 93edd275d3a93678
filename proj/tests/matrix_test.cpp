#include "dln/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "dln/rng.hpp"
#include "oracles.hpp"

using dln::Matrix;

namespace {

Matrix random_matrix(int rows, int cols, dln::Rng& rng) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = 2.0 * rng.uniform() - 1.0;
  return m;
}

Matrix random_psd(int n, dln::Rng& rng) {
  Matrix b = random_matrix(n, n, rng);
  return b * b.transposed();
}

// Random orthogonal matrix from the QR-free route: orthonormalize Gaussian columns.
Matrix random_orthogonal(int n, dln::Rng& rng) {
  Matrix g = dln::gaussian_matrix(n, n, 1.0, rng);
  Matrix q(n, n);
  for (int j = 0; j < n; ++j) {
    std::vector<double> v(n);
    for (int i = 0; i < n; ++i) v[i] = g(i, j);
    for (int prev = 0; prev < j; ++prev) {
      double proj = 0.0;
      for (int i = 0; i < n; ++i) proj += q(i, prev) * v[i];
      for (int i = 0; i < n; ++i) v[i] -= proj * q(i, prev);
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (int i = 0; i < n; ++i) q(i, j) = v[i] / norm;
  }
  return q;
}

}  // namespace

TEST(MatrixBasics, ProductAndTranspose) {
  Matrix a(2, 3, {1, 2, 3, 4, 5, 6});
  Matrix b(3, 2, {7, 8, 9, 10, 11, 12});
  Matrix c = a * b;
  EXPECT_DOUBLE_EQ(c(0, 0), 58.0);
  EXPECT_DOUBLE_EQ(c(0, 1), 64.0);
  EXPECT_DOUBLE_EQ(c(1, 0), 139.0);
  EXPECT_DOUBLE_EQ(c(1, 1), 154.0);
  Matrix at = a.transposed();
  EXPECT_EQ(at.rows(), 3);
  EXPECT_DOUBLE_EQ(at(2, 1), 6.0);
  EXPECT_THROW(a * a, std::invalid_argument);
}

TEST(MatrixBasics, NormsAndFiniteness) {
  Matrix a(1, 2, {3, 4});
  EXPECT_DOUBLE_EQ(a.frobenius_norm(), 5.0);
  EXPECT_DOUBLE_EQ(a.max_abs(), 4.0);
  EXPECT_TRUE(a.all_finite());
  a(0, 0) = std::nan("");
  EXPECT_FALSE(a.all_finite());
}

TEST(Vec, ColumnFirstOrder) {
  Matrix a(2, 2, {1, 2, 3, 4});
  std::vector<double> v = dln::vec(a);
  std::vector<double> expected{1, 3, 2, 4};
  EXPECT_EQ(v, expected);
  Matrix back = dln::unvec(v, 2, 2);
  EXPECT_EQ(oracle::max_abs_diff(a, back), 0.0);
}

TEST(Vec, RoundTripRectangular) {
  dln::Rng rng(11);
  Matrix a = random_matrix(3, 5, rng);
  EXPECT_EQ(oracle::max_abs_diff(dln::unvec(dln::vec(a), 3, 5), a), 0.0);
}

TEST(Kron, HandExamples) {
  Matrix a(1, 2, {1, 2});
  Matrix b(2, 1, {3, 4});
  Matrix k = dln::kron(a, b);
  ASSERT_EQ(k.rows(), 2);
  ASSERT_EQ(k.cols(), 2);
  EXPECT_DOUBLE_EQ(k(0, 0), 3.0);
  EXPECT_DOUBLE_EQ(k(1, 0), 4.0);
  EXPECT_DOUBLE_EQ(k(0, 1), 6.0);
  EXPECT_DOUBLE_EQ(k(1, 1), 8.0);

  Matrix i2 = Matrix::identity(2);
  Matrix c(2, 2, {1, 2, 3, 4});
  Matrix blockdiag = dln::kron(i2, c);
  EXPECT_DOUBLE_EQ(blockdiag(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(blockdiag(2, 2), 1.0);
  EXPECT_DOUBLE_EQ(blockdiag(3, 2), 3.0);
  EXPECT_DOUBLE_EQ(blockdiag(0, 2), 0.0);
}

TEST(Kron, VectorizationIdentities) {
  dln::Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix a = random_matrix(3, 4, rng);
    Matrix b = random_matrix(4, 2, rng);
    std::vector<double> lhs = dln::vec(a * b);

    // vec(AB) = (B^T kron I_rows(A)) vec(A)
    Matrix m1 = dln::kron(b.transposed(), Matrix::identity(3));
    Matrix v1 = m1 * dln::unvec(dln::vec(a), 12, 1);
    // vec(AB) = (I_cols(B) kron A) vec(B)
    Matrix m2 = dln::kron(Matrix::identity(2), a);
    Matrix v2 = m2 * dln::unvec(dln::vec(b), 8, 1);

    for (int i = 0; i < 6; ++i) {
      EXPECT_NEAR(v1(i, 0), lhs[i], 1e-10);
      EXPECT_NEAR(v2(i, 0), lhs[i], 1e-10);
    }
  }
}

TEST(Kron, MixedProductAndTranspose) {
  dln::Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    Matrix a = random_matrix(2, 3, rng);
    Matrix b = random_matrix(3, 2, rng);
    Matrix c = random_matrix(3, 2, rng);
    Matrix d = random_matrix(2, 3, rng);
    Matrix lhs = dln::kron(a * c, b * d);
    Matrix rhs = dln::kron(a, b) * dln::kron(c, d);
    EXPECT_LE(oracle::max_abs_diff(lhs, rhs), 1e-10);

    Matrix t1 = dln::kron(a, b).transposed();
    Matrix t2 = dln::kron(a.transposed(), b.transposed());
    EXPECT_LE(oracle::max_abs_diff(t1, t2), 1e-10);
  }
}

TEST(Kron, OrthogonalTimesOrthogonalIsOrthogonal) {
  dln::Rng rng(29);
  Matrix q1 = random_orthogonal(3, rng);
  Matrix q2 = random_orthogonal(2, rng);
  Matrix k = dln::kron(q1, q2);
  Matrix gram = k.transposed() * k;
  EXPECT_LE(oracle::max_abs_diff(gram, Matrix::identity(6)), 1e-10);
}

TEST(Svd, IdentityFactors) {
  dln::SvdFactors f = dln::svd(Matrix::identity(3));
  ASSERT_EQ(f.s.size(), 3u);
  for (double s : f.s) EXPECT_NEAR(s, 1.0, 1e-14);
  EXPECT_LE(oracle::max_abs_diff(f.u * f.v.transposed(), Matrix::identity(3)), 1e-14);
}

TEST(Svd, DiagonalWithZero) {
  Matrix a(2, 2, {3, 0, 0, 0});
  dln::SvdFactors f = dln::svd(a);
  ASSERT_EQ(f.s.size(), 2u);
  EXPECT_NEAR(f.s[0], 3.0, 1e-14);
  EXPECT_NEAR(f.s[1], 0.0, 1e-14);
}

TEST(Svd, ReconstructionAndOrthonormality) {
  dln::Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix a = random_matrix(4, 6, rng);
    dln::SvdFactors f = dln::svd(a);
    ASSERT_EQ(f.s.size(), 4u);
    EXPECT_TRUE(std::is_sorted(f.s.rbegin(), f.s.rend()));
    for (double s : f.s) EXPECT_GE(s, 0.0);

    Matrix sigma(4, 4);
    for (int i = 0; i < 4; ++i) sigma(i, i) = f.s[i];
    Matrix rebuilt = f.u * sigma * f.v.transposed();
    EXPECT_LE(oracle::max_abs_diff(rebuilt, a), 1e-10 * std::max(1.0, a.frobenius_norm()));

    EXPECT_LE(oracle::max_abs_diff(f.u.transposed() * f.u, Matrix::identity(4)), 1e-10);
    EXPECT_LE(oracle::max_abs_diff(f.v.transposed() * f.v, Matrix::identity(4)), 1e-10);
  }
}

TEST(Svd, Deterministic) {
  dln::Rng rng(37);
  Matrix a = random_matrix(5, 3, rng);
  dln::SvdFactors f1 = dln::svd(a);
  dln::SvdFactors f2 = dln::svd(a);
  EXPECT_EQ(f1.u.data(), f2.u.data());
  EXPECT_EQ(f1.v.data(), f2.v.data());
  EXPECT_EQ(f1.s, f2.s);
}

TEST(Svd, RejectsNonFinite) {
  Matrix a(1, 1, {std::numeric_limits<double>::infinity()});
  EXPECT_THROW(dln::svd(a), dln::NumericError);
}

TEST(PsdFracPower, IdentityAndDiagonal) {
  EXPECT_LE(oracle::max_abs_diff(dln::psd_frac_power(Matrix::identity(3), 0.5),
                                 Matrix::identity(3)),
            1e-12);
  Matrix d(2, 2, {4, 0, 0, 9});
  Matrix half = dln::psd_frac_power(d, 0.5);
  EXPECT_NEAR(half(0, 0), 2.0, 1e-12);
  EXPECT_NEAR(half(1, 1), 3.0, 1e-12);
  EXPECT_NEAR(half(0, 1), 0.0, 1e-12);
}

TEST(PsdFracPower, ZeroToTheZeroIsOne) {
  // A^0 must be the identity even when A is singular.
  Matrix a(2, 2, {1, 0, 0, 0});
  EXPECT_LE(oracle::max_abs_diff(dln::psd_frac_power(a, 0.0), Matrix::identity(2)), 1e-12);
  Matrix zero(3, 3);
  EXPECT_LE(oracle::max_abs_diff(dln::psd_frac_power(zero, 0.0), Matrix::identity(3)), 1e-12);
  EXPECT_LE(dln::psd_frac_power(zero, 0.5).max_abs(), 1e-12);
}

TEST(PsdFracPower, MatchesJacobiOracle) {
  dln::Rng rng(41);
  for (int trial = 0; trial < 10; ++trial) {
    Matrix a = random_psd(4, rng);
    Matrix third = dln::psd_frac_power(a, 1.0 / 3.0);
    auto [q, lam] = oracle::jacobi_eig(a);
    Matrix d(4, 4);
    for (int i = 0; i < 4; ++i) d(i, i) = std::pow(std::max(0.0, lam[i]), 1.0 / 3.0);
    Matrix expected = q * d * q.transposed();
    EXPECT_LE(oracle::max_abs_diff(third, expected), 1e-10);
    // Inverse check: cubing recovers the input.
    EXPECT_LE(oracle::max_abs_diff(third * third * third, a), 1e-9);
  }
}

TEST(PsdFracPower, SemigroupProperty) {
  dln::Rng rng(43);
  for (int trial = 0; trial < 10; ++trial) {
    Matrix a = random_psd(3, rng);
    double alpha = 0.5 * rng.uniform();
    double beta = 0.5 * rng.uniform();
    Matrix lhs = dln::psd_frac_power(a, alpha) * dln::psd_frac_power(a, beta);
    Matrix rhs = dln::psd_frac_power(a, alpha + beta);
    double scale = std::pow(a.frobenius_norm(), alpha + beta);
    EXPECT_LE(oracle::max_abs_diff(lhs, rhs), 1e-9 * std::max(1.0, scale));
  }
}

TEST(PsdFracPower, FullPowerReturnsInput) {
  dln::Rng rng(47);
  Matrix a = random_psd(4, rng);
  EXPECT_LE(oracle::max_abs_diff(dln::psd_frac_power(a, 1.0), a),
            1e-10 * std::max(1.0, a.frobenius_norm()));
}

TEST(PsdFracPower, Errors) {
  Matrix asym(2, 2, {1, 2, 0, 1});
  EXPECT_THROW(dln::psd_frac_power(asym, 0.5), dln::NumericError);
  Matrix negdef(2, 2, {-1, 0, 0, 1});
  EXPECT_THROW(dln::psd_frac_power(negdef, 0.5), dln::NumericError);
  Matrix rect(2, 3);
  EXPECT_THROW(dln::psd_frac_power(rect, 0.5), std::invalid_argument);
  Matrix ok = Matrix::identity(2);
  EXPECT_THROW(dln::psd_frac_power(ok, 1.5), std::invalid_argument);
  EXPECT_THROW(dln::psd_frac_power(ok, -0.1), std::invalid_argument);
}

TEST(CompleteBasis, ExtendsToFullDimension) {
  dln::Rng rng(53);
  Matrix a = random_matrix(5, 2, rng);
  dln::SvdFactors f = dln::svd(a);  // f.u has 2 orthonormal columns in R^5
  Matrix full = dln::complete_orthonormal_basis(f.u, 5);
  EXPECT_LE(oracle::max_abs_diff(full.transposed() * full, Matrix::identity(5)), 1e-10);
  // The original columns come first, untouched.
  for (int j = 0; j < 2; ++j)
    for (int i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(full(i, j), f.u(i, j));
}

TEST(JacobiOracleSelfCheck, ReconstructsInput) {
  dln::Rng rng(59);
  Matrix a = random_psd(5, rng);
  auto [q, lam] = oracle::jacobi_eig(a);
  Matrix d(5, 5);
  for (int i = 0; i < 5; ++i) d(i, i) = lam[i];
  EXPECT_LE(oracle::max_abs_diff(q * d * q.transposed(), a), 1e-10);
  EXPECT_LE(oracle::max_abs_diff(q.transposed() * q, Matrix::identity(5)), 1e-10);
}
