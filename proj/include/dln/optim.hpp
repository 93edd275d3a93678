#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include "dln/matrix.hpp"
#include "dln/network.hpp"
#include "dln/objective.hpp"

namespace dln {

struct GdConfig {
  double learning_rate;
  double weight_decay = 0.0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("GdConfig: learning_rate must be > 0");
    if (weight_decay < 0.0) throw std::invalid_argument("GdConfig: weight_decay must be >= 0");
  }
};

// Weights evolved by the collapsed update rules, remembering which network
// depth they emulate.
struct EndToEndState {
  Matrix weights;
  int depth;
  GdConfig config;
};

namespace detail {

inline double zero_pow(double x, double a) {
  if (x == 0.0) return a == 0.0 ? 1.0 : 0.0;
  return std::pow(x, a);
}

}  // namespace detail

// Simultaneous decayed gradient step on every layer, gradients taken at the
// pre-step weights.
inline LinearNetwork gd_step_deep(const LinearNetwork& net, const LpObjective& obj,
                                  const GdConfig& config) {
  config.validate();
  std::vector<Matrix> grads = layer_grads(net, obj);
  LinearNetwork out = net;
  double keep = 1.0 - config.learning_rate * config.weight_decay;
  for (int j = 0; j < net.depth(); ++j) {
    out.weights[j] = keep * net.weights[j] - config.learning_rate * grads[j];
    if (!out.weights[j].all_finite())
      throw DivergenceError("gd_step_deep: non-finite weights", lossN(net, obj));
  }
  return out;
}

// Sum over layer positions of [WW^T]^{(j-1)/n} * grad * [W^T W]^{(n-j)/n}.
// This is the descent direction the collapsed network follows.
inline Matrix e2e_direction(const Matrix& weights, const Matrix& grad, int depth) {
  if (depth < 1) throw std::invalid_argument("e2e_direction: depth must be >= 1");
  if (grad.rows() != weights.rows() || grad.cols() != weights.cols())
    throw std::invalid_argument("e2e_direction: gradient shape mismatch");
  if (depth == 1) return grad;
  Matrix left_gram = weights * weights.transposed();
  Matrix right_gram = weights.transposed() * weights;
  Matrix sum(weights.rows(), weights.cols());
  for (int j = 1; j <= depth; ++j) {
    Matrix left = psd_frac_power(left_gram, static_cast<double>(j - 1) / depth);
    Matrix right = psd_frac_power(right_gram, static_cast<double>(depth - j) / depth);
    sum += left * grad * right;
  }
  return sum;
}

inline EndToEndState e2e_step_general(const EndToEndState& state, const Matrix& grad) {
  state.config.validate();
  double eta = state.config.learning_rate;
  double keep = 1.0 - eta * state.config.weight_decay * state.depth;
  EndToEndState out = state;
  out.weights = keep * state.weights - eta * e2e_direction(state.weights, grad, state.depth);
  if (!out.weights.all_finite())
    throw DivergenceError("e2e_step_general: non-finite weights",
                          std::numeric_limits<double>::quiet_NaN());
  return out;
}

// Eigenvalue of the collapsed-update preconditioner attached to the
// singular-vector pair (u_r, v_{r'}): sum_j s_r^{2(n-j)/n} * s_{r'}^{2(j-1)/n},
// with 0^0 := 1.
inline double precond_eigenvalue(double s_r, double s_rp, int depth) {
  double sum = 0.0;
  for (int j = 1; j <= depth; ++j)
    sum += detail::zero_pow(s_r * s_r, static_cast<double>(depth - j) / depth) *
           detail::zero_pow(s_rp * s_rp, static_cast<double>(j - 1) / depth);
  return sum;
}

// PSD preconditioner acting on column-first vectorized gradients. Its
// eigenvectors are vec(u_r v_{r'}^T) over the full singular bases of the
// weights (completed to square orthonormal matrices), with
// precond_eigenvalue entries; singular values past min(k, d) count as zero.
inline Matrix precond_matrix(const Matrix& weights, int depth) {
  if (depth < 1) throw std::invalid_argument("precond_matrix: depth must be >= 1");
  int k = weights.rows();
  int d = weights.cols();
  SvdFactors f = svd(weights);
  Matrix u_full = complete_orthonormal_basis(f.u, k);
  Matrix v_full = complete_orthonormal_basis(f.v, d);
  auto sigma = [&](int r) { return r < static_cast<int>(f.s.size()) ? f.s[r] : 0.0; };

  int n = k * d;
  Matrix p(n, n);
  std::vector<double> z(n);
  for (int r = 0; r < k; ++r) {
    for (int rp = 0; rp < d; ++rp) {
      double lam = precond_eigenvalue(sigma(r), sigma(rp), depth);
      if (lam == 0.0) continue;
      // vec(u_r v_rp^T), column-first: entry (rp-block, r-offset).
      for (int j = 0; j < d; ++j)
        for (int i = 0; i < k; ++i) z[j * k + i] = u_full(i, r) * v_full(j, rp);
      for (int a = 0; a < n; ++a) {
        double za = lam * z[a];
        if (za == 0.0) continue;
        for (int b = 0; b < n; ++b) p(a, b) += za * z[b];
      }
    }
  }
  return p;
}

// Same update as e2e_step_general, routed through the explicit vectorized
// preconditioner. Exists to cross-check the factored path.
inline EndToEndState e2e_step_vec(const EndToEndState& state, const Matrix& grad) {
  state.config.validate();
  double eta = state.config.learning_rate;
  double keep = 1.0 - eta * state.config.weight_decay * state.depth;
  int k = state.weights.rows();
  int d = state.weights.cols();
  Matrix p = precond_matrix(state.weights, state.depth);
  Matrix g_vec = unvec(vec(grad), k * d, 1);
  Matrix dir_vec = p * g_vec;
  Matrix dir = unvec(dir_vec.data(), k, d);
  EndToEndState out = state;
  out.weights = keep * state.weights - eta * dir;
  if (!out.weights.all_finite())
    throw DivergenceError("e2e_step_vec: non-finite weights",
                          std::numeric_limits<double>::quiet_NaN());
  return out;
}

// Orthogonal projection of v onto the span of w (row vectors); zero when
// w is zero.
inline Matrix project_onto(const Matrix& w, const Matrix& v) {
  if (w.rows() != 1 || v.rows() != 1 || w.cols() != v.cols())
    throw std::invalid_argument("project_onto: expects row vectors of equal length");
  double norm_sq = dot(w, w);
  if (norm_sq == 0.0) return Matrix(1, w.cols());
  return (dot(w, v) / norm_sq) * w;
}

// Single-output specialization of the collapsed update:
// w <- (1 - eta*decay*n) w - eta * ||w||^{2-2/n} (grad + (n-1) proj_w(grad)).
inline EndToEndState e2e_step_single(const EndToEndState& state, const Matrix& grad) {
  state.config.validate();
  if (state.weights.rows() != 1)
    throw std::invalid_argument("e2e_step_single: single-output weights required");
  if (grad.rows() != 1 || grad.cols() != state.weights.cols())
    throw std::invalid_argument("e2e_step_single: gradient shape mismatch");
  double eta = state.config.learning_rate;
  int n = state.depth;
  double keep = 1.0 - eta * state.config.weight_decay * n;
  double norm = state.weights.frobenius_norm();
  double factor = detail::zero_pow(norm, 2.0 - 2.0 / n);
  Matrix dir = grad + (n - 1.0) * project_onto(state.weights, grad);
  EndToEndState out = state;
  out.weights = keep * state.weights - eta * factor * dir;
  if (!out.weights.all_finite())
    throw DivergenceError("e2e_step_single: non-finite weights",
                          std::numeric_limits<double>::quiet_NaN());
  return out;
}

enum class AdaptiveVariant { adagrad, adadelta, adam };

struct AdaptiveState {
  AdaptiveVariant variant;
  Matrix grad_accum;    // adagrad: sum of squares; adadelta: EMA of squares; adam: 2nd moment
  Matrix update_accum;  // adadelta: EMA of squared raw updates; adam: 1st moment
  long step = 0;
  double eps;
  double rho;    // adadelta decay
  double beta1;  // adam
  double beta2;  // adam
};

inline AdaptiveState make_adaptive_state(AdaptiveVariant variant, int rows, int cols) {
  AdaptiveState s;
  s.variant = variant;
  s.grad_accum = Matrix(rows, cols);
  s.update_accum = Matrix(rows, cols);
  switch (variant) {
    case AdaptiveVariant::adagrad:
      s.eps = 1e-8;
      s.rho = 0.0;
      s.beta1 = 0.0;
      s.beta2 = 0.0;
      break;
    case AdaptiveVariant::adadelta:
      s.eps = 1e-6;
      s.rho = 0.95;
      s.beta1 = 0.0;
      s.beta2 = 0.0;
      break;
    case AdaptiveVariant::adam:
      s.eps = 1e-8;
      s.rho = 0.0;
      s.beta1 = 0.9;
      s.beta2 = 0.999;
      break;
  }
  return s;
}

// One adaptive step on a flat weight matrix. Returns the new weights and
// the advanced accumulator state.
inline std::pair<Matrix, AdaptiveState> adaptive_step(const AdaptiveState& state, const Matrix& w,
                                                      const Matrix& grad, double eta) {
  if (w.rows() != grad.rows() || w.cols() != grad.cols())
    throw std::invalid_argument("adaptive_step: gradient shape mismatch");
  if (state.grad_accum.rows() != w.rows() || state.grad_accum.cols() != w.cols())
    throw std::invalid_argument("adaptive_step: state shape mismatch");
  if (!(eta > 0.0)) throw std::invalid_argument("adaptive_step: eta must be > 0");

  AdaptiveState next = state;
  next.step = state.step + 1;
  Matrix out = w;
  int rows = w.rows(), cols = w.cols();

  switch (state.variant) {
    case AdaptiveVariant::adagrad:
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) {
          double g = grad(i, j);
          next.grad_accum(i, j) = state.grad_accum(i, j) + g * g;
          out(i, j) = w(i, j) - eta * g / (std::sqrt(next.grad_accum(i, j)) + state.eps);
        }
      break;
    case AdaptiveVariant::adadelta:
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) {
          double g = grad(i, j);
          next.grad_accum(i, j) = state.rho * state.grad_accum(i, j) + (1 - state.rho) * g * g;
          double raw = std::sqrt(state.update_accum(i, j) + state.eps) /
                       std::sqrt(next.grad_accum(i, j) + state.eps) * g;
          next.update_accum(i, j) =
              state.rho * state.update_accum(i, j) + (1 - state.rho) * raw * raw;
          out(i, j) = w(i, j) - eta * raw;
        }
      break;
    case AdaptiveVariant::adam: {
      double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(next.step));
      double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(next.step));
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) {
          double g = grad(i, j);
          next.update_accum(i, j) = state.beta1 * state.update_accum(i, j) + (1 - state.beta1) * g;
          next.grad_accum(i, j) = state.beta2 * state.grad_accum(i, j) + (1 - state.beta2) * g * g;
          double m_hat = next.update_accum(i, j) / bc1;
          double v_hat = next.grad_accum(i, j) / bc2;
          out(i, j) = w(i, j) - eta * m_hat / (std::sqrt(v_hat) + state.eps);
        }
      break;
    }
  }
  if (!out.all_finite())
    throw DivergenceError("adaptive_step: non-finite weights",
                          std::numeric_limits<double>::quiet_NaN());
  return {out, next};
}

namespace detail {

using LayerStack = std::vector<Matrix>;

inline LayerStack stack_add_scaled(const LayerStack& a, const LayerStack& b, double c) {
  LayerStack out = a;
  for (std::size_t j = 0; j < out.size(); ++j) out[j] += c * b[j];
  return out;
}

// Classical fourth-order Runge-Kutta over a stack of matrices.
template <typename Rhs>
LayerStack rk4_step(const LayerStack& state, double dt, const Rhs& rhs) {
  LayerStack k1 = rhs(state);
  LayerStack k2 = rhs(stack_add_scaled(state, k1, dt / 2));
  LayerStack k3 = rhs(stack_add_scaled(state, k2, dt / 2));
  LayerStack k4 = rhs(stack_add_scaled(state, k3, dt));
  LayerStack out = state;
  for (std::size_t j = 0; j < out.size(); ++j) {
    out[j] += (dt / 6.0) * k1[j];
    out[j] += (dt / 3.0) * k2[j];
    out[j] += (dt / 3.0) * k3[j];
    out[j] += (dt / 6.0) * k4[j];
  }
  return out;
}

}  // namespace detail

// Integrates the layer-wise flow dW_j/dt = -eta*decay*W_j - eta*dL/dW_j.
// Returns the trajectory sampled at every step, initial state included.
inline std::vector<LinearNetwork> flow_rk4_deep(const LinearNetwork& net, const LpObjective& obj,
                                                const GdConfig& config, double dt, int steps) {
  config.validate();
  if (!(dt > 0.0) || steps < 0) throw std::invalid_argument("flow_rk4_deep: bad dt or steps");
  double eta = config.learning_rate;
  double decay = config.weight_decay;

  LinearNetwork work = net;
  auto rhs = [&](const detail::LayerStack& stack) {
    work.weights = stack;
    std::vector<Matrix> grads = layer_grads(work, obj);
    detail::LayerStack out(stack.size());
    for (std::size_t j = 0; j < stack.size(); ++j)
      out[j] = -eta * decay * stack[j] - eta * grads[j];
    return out;
  };

  std::vector<LinearNetwork> trajectory;
  trajectory.reserve(steps + 1);
  trajectory.push_back(net);
  detail::LayerStack state = net.weights;
  for (int s = 0; s < steps; ++s) {
    state = detail::rk4_step(state, dt, rhs);
    LinearNetwork snap = net;
    snap.weights = state;
    for (const Matrix& w : state)
      if (!w.all_finite())
        throw DivergenceError("flow_rk4_deep: non-finite state",
                              lossN(trajectory.back(), obj));
    trajectory.push_back(std::move(snap));
  }
  return trajectory;
}

// Integrates the collapsed flow dW/dt = -eta*decay*n*W - eta*e2e_direction.
inline std::vector<Matrix> flow_rk4_e2e(const Matrix& weights, const LpObjective& obj,
                                        const GdConfig& config, int depth, double dt, int steps) {
  config.validate();
  if (depth < 1) throw std::invalid_argument("flow_rk4_e2e: depth must be >= 1");
  if (!(dt > 0.0) || steps < 0) throw std::invalid_argument("flow_rk4_e2e: bad dt or steps");
  double eta = config.learning_rate;
  double decay = config.weight_decay;

  auto rhs = [&](const detail::LayerStack& stack) {
    const Matrix& w = stack[0];
    detail::LayerStack out(1);
    out[0] = -eta * decay * depth * w - eta * e2e_direction(w, grad1(w, obj), depth);
    return out;
  };

  std::vector<Matrix> trajectory;
  trajectory.reserve(steps + 1);
  trajectory.push_back(weights);
  detail::LayerStack state{weights};
  for (int s = 0; s < steps; ++s) {
    state = detail::rk4_step(state, dt, rhs);
    if (!state[0].all_finite())
      throw DivergenceError("flow_rk4_e2e: non-finite state", loss1(trajectory.back(), obj));
    trajectory.push_back(state[0]);
  }
  return trajectory;
}

// Plain gradient step on the (row vector, scalar) product parameterization
// w = w2 * w1 of a scalar-output objective.
inline std::pair<Matrix, double> overparam_pair_step(const Matrix& w1, double w2,
                                                     const LpObjective& obj, double eta) {
  if (w1.rows() != 1) throw std::invalid_argument("overparam_pair_step: w1 must be a row vector");
  if (obj.data.output_dim() != 1)
    throw std::invalid_argument("overparam_pair_step: scalar-output objective required");
  Matrix collapsed = w2 * w1;
  Matrix g = grad1(collapsed, obj);
  Matrix g_w1 = w2 * g;
  double g_w2 = dot(g, w1);
  return {w1 - eta * g_w1, w2 - eta * g_w2};
}

// The same step rewritten over the collapsed weights reads
// w <- w - rate * grad - shrink * w + O(eta^2); these are the coefficients.
struct PairCoeffs {
  double rate;    // eta * w2^2
  double shrink;  // eta * grad_w2 / w2
};

inline PairCoeffs overparam_pair_coeffs(const Matrix& w1, double w2, const LpObjective& obj,
                                        double eta) {
  if (w2 == 0.0) throw std::invalid_argument("overparam_pair_coeffs: undefined at w2 = 0");
  Matrix collapsed = w2 * w1;
  double g_w2 = dot(grad1(collapsed, obj), w1);
  return {eta * w2 * w2, eta * g_w2 / w2};
}

}  // namespace dln
