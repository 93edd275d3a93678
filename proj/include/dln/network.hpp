#pragma once

#include <cstdint>
#include <vector>

#include "dln/matrix.hpp"
#include "dln/rng.hpp"

namespace dln {

// Layered linear model x -> W_N ... W_1 x. widths = (n_0, ..., n_N) with
// n_0 the input dimension and n_N the output dimension; weights[j-1] is W_j
// of shape n_j x n_{j-1}.
struct LinearNetwork {
  std::vector<int> widths;
  std::vector<Matrix> weights;

  int depth() const { return static_cast<int>(weights.size()); }
  int input_dim() const { return widths.front(); }
  int output_dim() const { return widths.back(); }
};

namespace detail {

inline void check_widths(const std::vector<int>& widths) {
  if (widths.size() < 2) throw std::invalid_argument("network: need at least one layer");
  for (int w : widths)
    if (w < 1) throw std::invalid_argument("network: widths must be positive");
}

}  // namespace detail

// Every entry iid Gaussian(0, stddev^2). stddev must be positive; use
// init_identity for deterministic starting points.
inline LinearNetwork init_gaussian(const std::vector<int>& widths, double stddev,
                                   std::uint64_t seed) {
  detail::check_widths(widths);
  if (!(stddev > 0.0)) throw std::invalid_argument("init_gaussian: stddev must be > 0");
  Rng rng(seed);
  LinearNetwork net;
  net.widths = widths;
  for (std::size_t j = 1; j < widths.size(); ++j)
    net.weights.push_back(gaussian_matrix(widths[j], widths[j - 1], stddev, rng));
  return net;
}

// Gaussian(0, stddev^2) noise plus `offset` on the (i, i) diagonal of every
// layer, rectangular layers included. stddev may be zero.
inline LinearNetwork init_identity(const std::vector<int>& widths, double stddev,
                                   std::uint64_t seed, double offset = 1.0) {
  detail::check_widths(widths);
  if (stddev < 0.0) throw std::invalid_argument("init_identity: stddev must be >= 0");
  Rng rng(seed);
  LinearNetwork net;
  net.widths = widths;
  for (std::size_t j = 1; j < widths.size(); ++j) {
    Matrix w = gaussian_matrix(widths[j], widths[j - 1], stddev, rng);
    int diag = std::min(widths[j], widths[j - 1]);
    for (int i = 0; i < diag; ++i) w(i, i) += offset;
    net.weights.push_back(std::move(w));
  }
  return net;
}

// Factors a given end-to-end matrix into layers satisfying
// W_{j+1}^T W_{j+1} = W_j W_j^T exactly (up to round-off), via the thin SVD
// target = U S V^T: each layer carries S^{1/N}, transported between fixed
// orthonormal column sets. Hidden widths must be at least min(k, d).
inline LinearNetwork balanced_from_target(const Matrix& target, const std::vector<int>& widths) {
  detail::check_widths(widths);
  int n = static_cast<int>(widths.size()) - 1;
  int d = widths.front();
  int k = widths.back();
  if (target.rows() != k || target.cols() != d)
    throw std::invalid_argument("balanced_from_target: target shape mismatch");

  LinearNetwork net;
  net.widths = widths;
  if (n == 1) {
    net.weights.push_back(target);
    return net;
  }

  int p = std::min(k, d);
  for (int j = 1; j < n; ++j)
    if (widths[j] < p)
      throw std::invalid_argument("balanced_from_target: hidden width below min(k, d)");

  SvdFactors f = svd(target);
  Matrix root(p, p);
  for (int i = 0; i < p; ++i) root(i, i) = std::pow(f.s[i], 1.0 / n);

  // a[j]: the first p standard basis vectors of R^{n_j}.
  auto basis_cols = [&](int rows) {
    Matrix a(rows, p);
    for (int i = 0; i < p; ++i) a(i, i) = 1.0;
    return a;
  };

  Matrix prev = basis_cols(widths[1]);
  net.weights.push_back(prev * root * f.v.transposed());
  for (int j = 2; j < n; ++j) {
    Matrix cur = basis_cols(widths[j]);
    net.weights.push_back(cur * root * prev.transposed());
    prev = cur;
  }
  net.weights.push_back(f.u * root * prev.transposed());
  return net;
}

// Samples an end-to-end target with per-entry stddev^N scale and factors it
// into balanced layers.
inline LinearNetwork init_balanced(const std::vector<int>& widths, double stddev,
                                   std::uint64_t seed) {
  detail::check_widths(widths);
  if (stddev < 0.0) throw std::invalid_argument("init_balanced: stddev must be >= 0");
  int n = static_cast<int>(widths.size()) - 1;
  Rng rng(seed);
  Matrix target = gaussian_matrix(widths.back(), widths.front(),
                                  std::pow(stddev, static_cast<double>(n)), rng);
  return balanced_from_target(target, widths);
}

// W_N * ... * W_1, accumulated from the input side.
inline Matrix end_to_end(const LinearNetwork& net) {
  if (net.weights.empty()) throw std::invalid_argument("end_to_end: empty network");
  Matrix acc = net.weights.front();
  for (std::size_t j = 1; j < net.weights.size(); ++j) acc = net.weights[j] * acc;
  return acc;
}

// max_j || W_{j+1}^T W_{j+1} - W_j W_j^T ||_F. Zero for a single layer.
inline double balancedness_residual(const LinearNetwork& net) {
  double worst = 0.0;
  for (std::size_t j = 0; j + 1 < net.weights.size(); ++j) {
    const Matrix& a = net.weights[j];
    const Matrix& b = net.weights[j + 1];
    worst = std::max(worst, (b.transposed() * b - a * a.transposed()).frobenius_norm());
  }
  return worst;
}

}  // namespace dln
