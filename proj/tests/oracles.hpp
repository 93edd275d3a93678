#pragma once

// Test-side reference implementations, deliberately independent of the
// library's factorization path (which goes through Eigen). Used as oracles
// only; quadratic-time everything, tiny matrices.

#include <cmath>
#include <utility>
#include <vector>

#include "dln/matrix.hpp"

namespace oracle {

// Cyclic Jacobi eigendecomposition of a symmetric matrix.
// Returns (Q, lambda) with A = Q diag(lambda) Q^T, Q orthonormal columns.
inline std::pair<dln::Matrix, std::vector<double>> jacobi_eig(const dln::Matrix& a_in,
                                                              int sweeps = 100) {
  int n = a_in.rows();
  dln::Matrix a = a_in;
  dln::Matrix q = dln::Matrix::identity(n);
  for (int sweep = 0; sweep < sweeps; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int r = p + 1; r < n; ++r) off += a(p, r) * a(p, r);
    if (off < 1e-30) break;
    for (int p = 0; p < n - 1; ++p) {
      for (int r = p + 1; r < n; ++r) {
        if (std::abs(a(p, r)) < 1e-300) continue;
        double theta = (a(r, r) - a(p, p)) / (2.0 * a(p, r));
        double t = (theta >= 0 ? 1.0 : -1.0) /
                   (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0);
        double s = t * c;
        for (int k = 0; k < n; ++k) {
          double akp = a(k, p), akr = a(k, r);
          a(k, p) = c * akp - s * akr;
          a(k, r) = s * akp + c * akr;
        }
        for (int k = 0; k < n; ++k) {
          double apk = a(p, k), ark = a(r, k);
          a(p, k) = c * apk - s * ark;
          a(r, k) = s * apk + c * ark;
        }
        for (int k = 0; k < n; ++k) {
          double qkp = q(k, p), qkr = q(k, r);
          q(k, p) = c * qkp - s * qkr;
          q(k, r) = s * qkp + c * qkr;
        }
      }
    }
  }
  std::vector<double> lam(n);
  for (int i = 0; i < n; ++i) lam[i] = a(i, i);
  return {q, lam};
}

// Central-difference gradient of a scalar function of a matrix.
template <typename F>
dln::Matrix fd_gradient(const F& f, const dln::Matrix& at, double step = 1e-5) {
  dln::Matrix g(at.rows(), at.cols());
  dln::Matrix w = at;
  for (int i = 0; i < at.rows(); ++i) {
    for (int j = 0; j < at.cols(); ++j) {
      double orig = w(i, j);
      w(i, j) = orig + step;
      double fp = f(w);
      w(i, j) = orig - step;
      double fm = f(w);
      w(i, j) = orig;
      g(i, j) = (fp - fm) / (2.0 * step);
    }
  }
  return g;
}

inline double max_abs_diff(const dln::Matrix& a, const dln::Matrix& b) {
  return (a - b).max_abs();
}

}  // namespace oracle
