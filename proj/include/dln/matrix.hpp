#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <vector>

#include <Eigen/Dense>

#include "dln/errors.hpp"

namespace dln {

// Dense real matrix, row-major. Small sizes only: everything here is O(n^3)
// without blocking or threading.
class Matrix {
 public:
  Matrix() = default;

  Matrix(int rows, int cols) : rows_(rows), cols_(cols) {
    if (rows < 0 || cols < 0) throw std::invalid_argument("Matrix: negative dimension");
    data_.assign(static_cast<std::size_t>(rows) * cols, 0.0);
  }

  Matrix(int rows, int cols, std::initializer_list<double> entries) : Matrix(rows, cols) {
    if (static_cast<std::size_t>(rows) * cols != entries.size())
      throw std::invalid_argument("Matrix: initializer size mismatch");
    std::copy(entries.begin(), entries.end(), data_.begin());
  }

  static Matrix identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }

  double& operator()(int i, int j) { return data_[static_cast<std::size_t>(i) * cols_ + j]; }
  double operator()(int i, int j) const { return data_[static_cast<std::size_t>(i) * cols_ + j]; }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (int i = 0; i < rows_; ++i)
      for (int j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  double frobenius_norm() const {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return std::sqrt(s);
  }

  double max_abs() const {
    double s = 0.0;
    for (double v : data_) s = std::max(s, std::abs(v));
    return s;
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  Matrix& operator+=(const Matrix& o) {
    check_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Matrix& operator-=(const Matrix& o) {
    check_same_shape(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }

  Matrix& operator*=(double c) {
    for (double& v : data_) v *= c;
    return *this;
  }

 private:
  void check_same_shape(const Matrix& o, const char* op) const {
    if (rows_ != o.rows_ || cols_ != o.cols_)
      throw std::invalid_argument(std::string("Matrix: shape mismatch in ") + op);
  }

  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

inline Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
inline Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
inline Matrix operator*(Matrix a, double c) { return a *= c; }
inline Matrix operator*(double c, Matrix a) { return a *= c; }

inline Matrix operator*(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("Matrix: incompatible shapes in product");
  Matrix c(a.rows(), b.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int k = 0; k < a.cols(); ++k) {
      double aik = a(i, k);
      if (aik == 0.0) continue;
      for (int j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
    }
  return c;
}

// Frobenius inner product <a, b> = sum_ij a_ij b_ij.
inline double dot(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("dot: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

// Column-first flattening: entry (i, j) lands at position j*rows + i.
inline std::vector<double> vec(const Matrix& a) {
  std::vector<double> out(static_cast<std::size_t>(a.rows()) * a.cols());
  std::size_t k = 0;
  for (int j = 0; j < a.cols(); ++j)
    for (int i = 0; i < a.rows(); ++i) out[k++] = a(i, j);
  return out;
}

// Inverse of vec for the given shape.
inline Matrix unvec(const std::vector<double>& v, int rows, int cols) {
  if (v.size() != static_cast<std::size_t>(rows) * cols)
    throw std::invalid_argument("unvec: size mismatch");
  Matrix a(rows, cols);
  std::size_t k = 0;
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) a(i, j) = v[k++];
  return a;
}

inline Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows() * b.rows(), a.cols() * b.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) {
      double aij = a(i, j);
      if (aij == 0.0) continue;
      for (int p = 0; p < b.rows(); ++p)
        for (int q = 0; q < b.cols(); ++q)
          c(i * b.rows() + p, j * b.cols() + q) = aij * b(p, q);
    }
  return c;
}

namespace detail {

inline Eigen::MatrixXd to_eigen(const Matrix& a) {
  Eigen::MatrixXd e(a.rows(), a.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) e(i, j) = a(i, j);
  return e;
}

inline Matrix from_eigen(const Eigen::MatrixXd& e) {
  Matrix a(static_cast<int>(e.rows()), static_cast<int>(e.cols()));
  for (int i = 0; i < e.rows(); ++i)
    for (int j = 0; j < e.cols(); ++j) a(static_cast<int>(i), static_cast<int>(j)) = e(i, j);
  return a;
}

// Spectrum entries below this fraction of the largest one are treated as
// exact zeros, so that rank-deficient inputs behave identically across the
// factored and non-factored code paths.
constexpr double kSpectrumFloor = 1e-12;

}  // namespace detail

struct SvdFactors {
  Matrix u;               // rows x p, orthonormal columns
  std::vector<double> s;  // p singular values, non-increasing, >= 0
  Matrix v;               // cols x p, orthonormal columns
};

// Thin SVD, a = u * diag(s) * v^T with p = min(rows, cols). Deterministic:
// the same input always yields the same factors.
inline SvdFactors svd(const Matrix& a) {
  if (a.rows() < 1 || a.cols() < 1) throw std::invalid_argument("svd: empty matrix");
  if (!a.all_finite()) throw NumericError("svd: non-finite input");
  Eigen::JacobiSVD<Eigen::MatrixXd> solver(detail::to_eigen(a),
                                           Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (solver.info() != Eigen::Success) throw NumericError("svd: factorization did not converge");
  SvdFactors f;
  f.u = detail::from_eigen(solver.matrixU());
  f.v = detail::from_eigen(solver.matrixV());
  const auto& sv = solver.singularValues();
  f.s.assign(sv.data(), sv.data() + sv.size());
  double smax = f.s.empty() ? 0.0 : f.s.front();
  for (double& s : f.s)
    if (s < detail::kSpectrumFloor * smax) s = 0.0;
  return f;
}

// A^alpha for symmetric PSD A via eigendecomposition, with the convention
// 0^0 := 1 so that A^0 = I holds even for singular A. Eigenvalues in
// [-tol, 0) are round-off and clamp to zero; anything more negative is an
// error. alpha must lie in [0, 1].
inline Matrix psd_frac_power(const Matrix& a, double alpha) {
  if (a.rows() != a.cols()) throw std::invalid_argument("psd_frac_power: matrix not square");
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw std::invalid_argument("psd_frac_power: alpha outside [0, 1]");
  if (!a.all_finite()) throw NumericError("psd_frac_power: non-finite input");

  double scale = std::max(1.0, a.max_abs());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = i + 1; j < a.cols(); ++j)
      if (std::abs(a(i, j) - a(j, i)) > 1e-9 * scale)
        throw NumericError("psd_frac_power: matrix not symmetric");

  Eigen::MatrixXd sym = detail::to_eigen(a);
  sym = 0.5 * (sym + sym.transpose().eval());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
  if (eig.info() != Eigen::Success)
    throw NumericError("psd_frac_power: eigendecomposition did not converge");

  Eigen::VectorXd lam = eig.eigenvalues();
  double lam_max = std::max(0.0, lam.maxCoeff());
  double neg_tol = 1e-9 * std::max(1.0, lam_max);
  Eigen::VectorXd powered(lam.size());
  for (int i = 0; i < lam.size(); ++i) {
    double l = lam(i);
    if (l < -neg_tol) throw NumericError("psd_frac_power: matrix not PSD");
    if (l < detail::kSpectrumFloor * lam_max) l = 0.0;
    powered(i) = (l == 0.0) ? (alpha == 0.0 ? 1.0 : 0.0) : std::pow(l, alpha);
  }
  Eigen::MatrixXd r = eig.eigenvectors() * powered.asDiagonal() * eig.eigenvectors().transpose();
  r = 0.5 * (r + r.transpose().eval());
  return detail::from_eigen(r);
}

// Extends a set of orthonormal columns to target_cols columns by
// Gram-Schmidt over the standard basis, in index order. Deterministic.
inline Matrix complete_orthonormal_basis(const Matrix& cols, int target_cols) {
  int n = cols.rows();
  if (target_cols > n)
    throw std::invalid_argument("complete_orthonormal_basis: target exceeds dimension");
  std::vector<std::vector<double>> basis;
  for (int j = 0; j < cols.cols(); ++j) {
    std::vector<double> c(n);
    for (int i = 0; i < n; ++i) c[i] = cols(i, j);
    basis.push_back(std::move(c));
  }
  for (int cand = 0; cand < n && static_cast<int>(basis.size()) < target_cols; ++cand) {
    std::vector<double> v(n, 0.0);
    v[cand] = 1.0;
    for (int pass = 0; pass < 2; ++pass) {  // re-orthogonalize once for stability
      for (const auto& b : basis) {
        double proj = 0.0;
        for (int i = 0; i < n; ++i) proj += b[i] * v[i];
        for (int i = 0; i < n; ++i) v[i] -= proj * b[i];
      }
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm > 1e-8) {
      for (double& x : v) x /= norm;
      basis.push_back(std::move(v));
    }
  }
  if (static_cast<int>(basis.size()) < target_cols)
    throw NumericError("complete_orthonormal_basis: could not complete basis");
  Matrix out(n, target_cols);
  for (int j = 0; j < target_cols; ++j)
    for (int i = 0; i < n; ++i) out(i, j) = basis[j][i];
  return out;
}

}  // namespace dln
