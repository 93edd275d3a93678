#pragma once

#include <cmath>
#include <vector>

#include "dln/matrix.hpp"
#include "dln/network.hpp"

namespace dln {

// Regression data: one example per row of x, one target row per row of y.
struct Dataset {
  Matrix x;  // m x d
  Matrix y;  // m x k

  int size() const { return x.rows(); }
  int input_dim() const { return x.cols(); }
  int output_dim() const { return y.cols(); }
};

inline void check_dataset(const Dataset& data) {
  if (data.x.rows() < 1) throw std::invalid_argument("dataset: empty");
  if (data.x.rows() != data.y.rows()) throw std::invalid_argument("dataset: row count mismatch");
}

// Mean l_p regression loss, p even and >= 2. Scalar output supports any
// even p; multi-output supports p = 2 only.
struct LpObjective {
  Dataset data;
  int p;

  LpObjective(Dataset d, int p_) : data(std::move(d)), p(p_) {
    check_dataset(data);
    if (p < 2 || p % 2 != 0) throw std::invalid_argument("LpObjective: p must be even and >= 2");
    if (p != 2 && data.output_dim() != 1)
      throw std::invalid_argument("LpObjective: p > 2 supported for scalar output only");
  }
};

// (1/m) sum_i (1/p) * |w x_i - y_i|^p, with the p = 2 multi-output case
// reading (1/m) sum_i (1/2) ||w x_i - y_i||^2.
inline double loss1(const Matrix& w, const LpObjective& obj) {
  const Dataset& data = obj.data;
  if (w.rows() != data.output_dim() || w.cols() != data.input_dim())
    throw std::invalid_argument("loss1: weight shape mismatch");
  int m = data.size();
  int k = data.output_dim();
  Matrix pred = data.x * w.transposed();  // m x k
  double total = 0.0;
  if (obj.p == 2) {
    for (int i = 0; i < m; ++i)
      for (int c = 0; c < k; ++c) {
        double r = pred(i, c) - data.y(i, c);
        total += 0.5 * r * r;
      }
  } else {
    for (int i = 0; i < m; ++i) {
      double r = pred(i, 0) - data.y(i, 0);
      total += std::pow(r, obj.p) / obj.p;
    }
  }
  return total / m;
}

// Gradient of loss1 with respect to w, shape k x d.
inline Matrix grad1(const Matrix& w, const LpObjective& obj) {
  const Dataset& data = obj.data;
  if (w.rows() != data.output_dim() || w.cols() != data.input_dim())
    throw std::invalid_argument("grad1: weight shape mismatch");
  int m = data.size();
  int d = data.input_dim();
  int k = data.output_dim();
  Matrix pred = data.x * w.transposed();
  Matrix g(k, d);
  for (int i = 0; i < m; ++i) {
    for (int c = 0; c < k; ++c) {
      double r = pred(i, c) - data.y(i, c);
      double coef = (obj.p == 2) ? r : std::pow(r, obj.p - 1);
      if (coef == 0.0) continue;
      for (int j = 0; j < d; ++j) g(c, j) += coef * data.x(i, j);
    }
  }
  g *= 1.0 / m;
  return g;
}

// Loss of the layered model, evaluated by collapsing to the end-to-end
// matrix and reusing loss1. Single code path on purpose.
inline double lossN(const LinearNetwork& net, const LpObjective& obj) {
  return loss1(end_to_end(net), obj);
}

// Per-layer gradients of lossN: suffix^T * grad1(W_e) * prefix^T, where
// prefix/suffix are the layer products below/above layer j.
inline std::vector<Matrix> layer_grads(const LinearNetwork& net, const LpObjective& obj) {
  int n = net.depth();
  Matrix g = grad1(end_to_end(net), obj);

  // suffix[j] = W_N ... W_{j+2} * W_{j+1} for 0-based layer index j.
  std::vector<Matrix> suffix(n);
  suffix[n - 1] = Matrix::identity(net.output_dim());
  for (int j = n - 2; j >= 0; --j) suffix[j] = suffix[j + 1] * net.weights[j + 1];

  std::vector<Matrix> grads;
  grads.reserve(n);
  Matrix prefix = Matrix::identity(net.input_dim());  // W_{j-1} ... W_1
  for (int j = 0; j < n; ++j) {
    grads.push_back(suffix[j].transposed() * g * prefix.transposed());
    if (j + 1 < n) prefix = net.weights[j] * prefix;
  }
  return grads;
}

struct Optimum {
  Matrix w;     // k x d minimizer
  double loss;  // loss1 at the minimizer
};

namespace detail {

// Moore-Penrose pseudoinverse solve: returns argmin_w ||a w - b||_F.
inline Matrix pinv_solve(const Matrix& a, const Matrix& b) {
  SvdFactors f = svd(a);
  double smax = f.s.empty() ? 0.0 : f.s.front();
  double cutoff = std::max(a.rows(), a.cols()) * 1e-15 * smax;
  Matrix ut_b = f.u.transposed() * b;
  for (int i = 0; i < ut_b.rows(); ++i) {
    double s = f.s[i];
    double inv = (s > cutoff) ? 1.0 / s : 0.0;
    for (int j = 0; j < ut_b.cols(); ++j) ut_b(i, j) *= inv;
  }
  return f.v * ut_b;
}

}  // namespace detail

// Global minimizer of loss1. p = 2 is solved in closed form through the
// pseudoinverse of the design matrix; even p > 2 (scalar output, convex)
// runs damped Newton until the gradient norm drops to 1e-10.
inline Optimum reference_optimum(const LpObjective& obj) {
  const Dataset& data = obj.data;
  if (obj.p == 2) {
    Matrix wt = detail::pinv_solve(data.x, data.y);  // d x k
    Matrix w = wt.transposed();
    return {w, loss1(w, obj)};
  }

  const int d = data.input_dim();
  const int m = data.size();
  const double grad_tol = 1e-10;
  const int max_iters = 10000;
  Matrix w(1, d);
  double cur_loss = loss1(w, obj);
  for (int iter = 0; iter < max_iters; ++iter) {
    Matrix g = grad1(w, obj);
    if (g.frobenius_norm() <= grad_tol) return {w, cur_loss};

    // Hessian (1/m) sum_i (p-1) r_i^{p-2} x_i x_i^T.
    Matrix pred = data.x * w.transposed();
    Matrix h(d, d);
    for (int i = 0; i < m; ++i) {
      double r = pred(i, 0) - data.y(i, 0);
      double coef = (obj.p - 1) * std::pow(r, obj.p - 2);
      if (coef == 0.0) continue;
      for (int a = 0; a < d; ++a) {
        double xa = coef * data.x(i, a);
        if (xa == 0.0) continue;
        for (int b = 0; b < d; ++b) h(a, b) += xa * data.x(i, b);
      }
    }
    h *= 1.0 / m;

    Matrix step = detail::pinv_solve(h, g.transposed()) * -1.0;  // d x 1
    Matrix dir = step.transposed();                              // 1 x d
    double slope = dot(g, dir);
    if (!(slope < 0.0)) {
      dir = g * -1.0;  // singular or indefinite numerics: fall back to steepest descent
      slope = -dot(g, g);
    }

    double t = 1.0;
    bool moved = false;
    for (int halvings = 0; halvings < 60; ++halvings) {
      Matrix cand = w + t * dir;
      double cand_loss = loss1(cand, obj);
      if (cand_loss <= cur_loss + 1e-4 * t * slope) {
        w = cand;
        cur_loss = cand_loss;
        moved = true;
        break;
      }
      t *= 0.5;
    }
    if (!moved)
      throw NumericError("reference_optimum: line search stalled with gradient norm " +
                         std::to_string(g.frobenius_norm()));
  }
  throw NumericError("reference_optimum: Newton did not reach tolerance in 10000 iterations");
}

}  // namespace dln
