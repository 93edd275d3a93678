#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "dln/matrix.hpp"
#include "dln/network.hpp"
#include "dln/objective.hpp"
#include "dln/optim.hpp"

namespace dln {

using GradFn = std::function<Matrix(const Matrix&)>;   // 1 x d -> 1 x d
using FieldFn = std::function<Matrix(const Matrix&)>;  // 1 x d -> 1 x d

// Closed loop used to probe path dependence: a segment from -R*e to -r*e,
// a half great circle of radius r back to +r*e, a segment out to +R*e, and
// a half great circle of radius R back to -R*e. Both arcs live in the same
// 2-plane span{e, u}.
struct CurveSpec {
  Matrix direction;  // unit row vector e
  double inner_radius;
  double outer_radius;
  int segments_per_piece;
};

// Inner radius at which the two arc contributions of the closed-form loop
// split evenly: r = R * 0.5^{1/(3-2/n)}.
inline double default_inner_radius(int depth, double outer_radius) {
  if (depth < 1) throw std::invalid_argument("default_inner_radius: depth must be >= 1");
  double q = 3.0 - 2.0 / depth;
  return outer_radius * std::pow(0.5, 1.0 / q);
}

class Curve {
 public:
  Curve(CurveSpec spec, Matrix plane_u) : spec_(std::move(spec)), u_(std::move(plane_u)) {}

  const CurveSpec& spec() const { return spec_; }
  const Matrix& plane_u() const { return u_; }
  static constexpr int pieces() { return 4; }

  // Point at parameter t in [0, 1] along the given piece.
  Matrix point(int piece, double t) const {
    const Matrix& e = spec_.direction;
    double r = spec_.inner_radius;
    double big_r = spec_.outer_radius;
    switch (piece) {
      case 0:  // -R e -> -r e
        return -(big_r + t * (r - big_r)) * e;
      case 1: {  // half circle of radius r, -r e -> +r e
        double th = std::numbers::pi * t;
        return r * (-std::cos(th) * e + std::sin(th) * u_);
      }
      case 2:  // r e -> R e
        return (r + t * (big_r - r)) * e;
      case 3: {  // half circle of radius R, +R e -> -R e
        double th = std::numbers::pi * t;
        return big_r * (std::cos(th) * e + std::sin(th) * u_);
      }
      default:
        throw std::invalid_argument("Curve::point: piece out of range");
    }
  }

  // Closed polyline with m segments per piece (endpoint of each piece is
  // the start of the next, so 4*m + 1 points, first == last).
  std::vector<Matrix> polyline(int m) const {
    if (m < 2) throw std::invalid_argument("Curve::polyline: need m >= 2");
    std::vector<Matrix> pts;
    pts.reserve(4 * m + 1);
    for (int piece = 0; piece < 4; ++piece)
      for (int i = 0; i < m; ++i)
        pts.push_back(point(piece, static_cast<double>(i) / m));
    pts.push_back(point(0, 0.0));
    return pts;
  }

 private:
  CurveSpec spec_;
  Matrix u_;  // unit row vector orthogonal to direction
};

inline Curve build_curve(const CurveSpec& spec) {
  const Matrix& e = spec.direction;
  if (e.rows() != 1 || e.cols() < 2)
    throw std::invalid_argument("build_curve: direction must be a row vector of dim >= 2");
  if (std::abs(e.frobenius_norm() - 1.0) > 1e-12)
    throw std::invalid_argument("build_curve: direction must be unit length");
  if (!(spec.inner_radius > 0.0) || !(spec.outer_radius > spec.inner_radius))
    throw std::invalid_argument("build_curve: need 0 < r < R");
  if (spec.segments_per_piece < 2)
    throw std::invalid_argument("build_curve: need at least 2 segments per piece");

  int d = e.cols();
  // Companion direction: Gram-Schmidt of the first standard basis vector
  // against e, falling back to the second when e is (anti)parallel to it.
  int pick = (std::abs(e(0, 0)) > 1.0 - 1e-8) ? 1 : 0;
  Matrix u(1, d);
  u(0, pick) = 1.0;
  u -= dot(u, e) * e;
  double norm = u.frobenius_norm();
  u *= 1.0 / norm;
  return Curve(spec, u);
}

// The direction a collapsed network of the given depth actually descends
// along, as a field over single-output weights:
// F(w) = ||w||^{2-2/n} (g(w) + (n-1) proj_w(g(w))), with F(0) = 0.
inline Matrix induced_field(const Matrix& w, const GradFn& grad_fn, int depth) {
  if (w.rows() != 1) throw std::invalid_argument("induced_field: row vector expected");
  if (depth < 1) throw std::invalid_argument("induced_field: depth must be >= 1");
  double norm = w.frobenius_norm();
  Matrix g = grad_fn(w);
  if (norm == 0.0) {
    if (depth == 1) return g;  // ||w||^0 = 1: the field is the raw gradient
    return Matrix(1, w.cols());
  }
  double factor = std::pow(norm, 2.0 - 2.0 / depth);
  return factor * (g + (depth - 1.0) * project_onto(w, g));
}

// Composite midpoint rule: sum over segments of <field(midpoint), delta>.
// m overrides the curve's own segments_per_piece.
inline double line_integral(const FieldFn& field, const Curve& curve, int m) {
  if (m < 2) throw std::invalid_argument("line_integral: need m >= 2");
  double total = 0.0;
  for (int piece = 0; piece < Curve::pieces(); ++piece) {
    for (int i = 0; i < m; ++i) {
      double t0 = static_cast<double>(i) / m;
      double t1 = static_cast<double>(i + 1) / m;
      Matrix mid = field(curve.point(piece, 0.5 * (t0 + t1)));
      if (!mid.all_finite()) throw NumericError("line_integral: non-finite field value");
      Matrix delta = curve.point(piece, t1) - curve.point(piece, t0);
      total += dot(mid, delta);
    }
  }
  return total;
}

// Exact loop integral of the induced field of a constant unit gradient:
// (2n/(3-2/n) - 2) * (R^{3-2/n} - r^{3-2/n}). Zero when n = 1.
inline double constant_field_loop_value(int depth, double r, double big_r) {
  if (depth < 1) throw std::invalid_argument("constant_field_loop_value: depth must be >= 1");
  double q = 3.0 - 2.0 / depth;
  return (2.0 * depth / q - 2.0) * (std::pow(big_r, q) - std::pow(r, q));
}

// Upper bound on |loop integral of the induced field of phi|:
// n * len(curve) * max ||gamma||^{2-2/n} * max ||phi(gamma)||, all maxima
// sampled on the curve's polyline at resolution m.
inline double loop_bound(const FieldFn& phi, const Curve& curve, int depth, int m) {
  if (depth < 1) throw std::invalid_argument("loop_bound: depth must be >= 1");
  std::vector<Matrix> pts = curve.polyline(m);
  double arclen = 0.0;
  double max_norm = 0.0;
  double max_phi = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (i + 1 < pts.size()) arclen += (pts[i + 1] - pts[i]).frobenius_norm();
    max_norm = std::max(max_norm, pts[i].frobenius_norm());
    max_phi = std::max(max_phi, phi(pts[i]).frobenius_norm());
  }
  return depth * arclen * std::pow(max_norm, 2.0 - 2.0 / depth) * max_phi;
}

enum class Verdict { conservative_consistent, non_conservative };

// Everything measured on one probe loop. The lower bound
// constant_part - residual_bound can be vacuous (negative) when the
// gradient varies quickly relative to its value at the origin; both terms
// are reported so that case is visible.
struct ConservativityReport {
  int depth = 0;
  int dim = 0;
  double inner_radius = 0.0;
  double outer_radius = 0.0;
  int segments_per_piece = 0;
  double grad_norm_at_origin = 0.0;
  double loop_integral = 0.0;               // loop of the induced field
  double raw_gradient_loop_integral = 0.0;  // loop of the gradient itself
  double constant_part = 0.0;               // ||g(0)|| * closed-form loop value
  double residual_bound = 0.0;              // bound on the varying part's loop
  double lower_bound = 0.0;                 // constant_part - residual_bound
  Verdict verdict = Verdict::conservative_consistent;
};

inline ConservativityReport conservativity_report(const GradFn& grad_fn, int dim, int depth,
                                                  double r, double big_r, int m) {
  if (dim < 2) throw std::invalid_argument("conservativity_report: dim must be >= 2");
  Matrix origin(1, dim);
  Matrix g0 = grad_fn(origin);
  double c = g0.frobenius_norm();
  if (!(c > 0.0))
    throw std::invalid_argument("conservativity_report: gradient at the origin vanishes");
  Matrix e = (1.0 / c) * g0;

  Curve curve = build_curve(CurveSpec{e, r, big_r, m});
  ConservativityReport rep;
  rep.depth = depth;
  rep.dim = dim;
  rep.inner_radius = r;
  rep.outer_radius = big_r;
  rep.segments_per_piece = m;
  rep.grad_norm_at_origin = c;
  rep.loop_integral = line_integral(
      [&](const Matrix& w) { return induced_field(w, grad_fn, depth); }, curve, m);
  rep.raw_gradient_loop_integral = line_integral(grad_fn, curve, m);
  rep.constant_part = c * constant_field_loop_value(depth, r, big_r);
  rep.residual_bound =
      loop_bound([&](const Matrix& w) { return grad_fn(w) - g0; }, curve, depth, m);
  rep.lower_bound = rep.constant_part - rep.residual_bound;
  bool nonzero = std::abs(rep.loop_integral) >
                 std::max(10.0 * std::abs(rep.raw_gradient_loop_integral), 1e-8);
  rep.verdict = nonzero ? Verdict::non_conservative : Verdict::conservative_consistent;
  return rep;
}

// max over the probe points of || J - J^T ||_F, where J is the Jacobian of
// the induced field estimated by central differences.
inline double jacobian_asymmetry(const GradFn& grad_fn, int depth,
                                 const std::vector<Matrix>& points, double step = 1e-5) {
  if (!(step > 0.0)) throw std::invalid_argument("jacobian_asymmetry: step must be > 0");
  double worst = 0.0;
  for (const Matrix& at : points) {
    int d = at.cols();
    Matrix jac(d, d);
    Matrix w = at;
    for (int j = 0; j < d; ++j) {
      double orig = w(0, j);
      w(0, j) = orig + step;
      Matrix fp = induced_field(w, grad_fn, depth);
      w(0, j) = orig - step;
      Matrix fm = induced_field(w, grad_fn, depth);
      w(0, j) = orig;
      for (int i = 0; i < d; ++i) jac(i, j) = (fp(0, i) - fm(0, i)) / (2.0 * step);
    }
    worst = std::max(worst, (jac - jac.transposed()).frobenius_norm());
  }
  return worst;
}

// Gradient of the probe loss <w, e_1> + 0.5 ||w||^2: constant part plus a
// radial (curl-free) part. Used by the CLI's loop subcommand and tests.
inline GradFn default_probe_gradient(int dim) {
  if (dim < 2) throw std::invalid_argument("default_probe_gradient: dim must be >= 2");
  return [dim](const Matrix& w) {
    Matrix g = w;
    g(0, 0) += 1.0;
    return g;
  };
}

// Side-by-side run of layer-wise GD and the collapsed update from the same
// (collapsed) starting point. Losses are recorded before each step, so
// entry t is the loss after t steps; weight_gaps tracks the Frobenius
// distance between the two end-to-end trajectories.
struct EmulationReport {
  std::vector<double> deep_losses;
  std::vector<double> e2e_losses;
  std::vector<double> weight_gaps;
  double max_rel_loss_gap = 0.0;
  bool deep_diverged = false;
  bool e2e_diverged = false;
};

inline EmulationReport emulation_report(const std::vector<int>& widths, const LpObjective& obj,
                                        double eta, int iters, std::uint64_t seed,
                                        double init_std) {
  // Balanced near-zero init: the layer-wise and collapsed dynamics are the
  // same flow exactly, so the gap below measures discretization only.
  LinearNetwork net = init_balanced(widths, init_std, seed);
  EndToEndState e2e{end_to_end(net), net.depth(), GdConfig{eta, 0.0}};
  bool single_output = e2e.weights.rows() == 1;

  EmulationReport rep;
  rep.deep_losses.reserve(iters + 1);
  rep.e2e_losses.reserve(iters + 1);
  rep.weight_gaps.reserve(iters + 1);
  for (int t = 0; t <= iters; ++t) {
    double deep_loss = lossN(net, obj);
    double e2e_loss = loss1(e2e.weights, obj);
    if (!std::isfinite(deep_loss)) {
      rep.deep_diverged = true;
      break;
    }
    if (!std::isfinite(e2e_loss)) {
      rep.e2e_diverged = true;
      break;
    }
    rep.deep_losses.push_back(deep_loss);
    rep.e2e_losses.push_back(e2e_loss);
    rep.weight_gaps.push_back((end_to_end(net) - e2e.weights).frobenius_norm());
    double denom = std::max({deep_loss, e2e_loss, 1e-300});
    rep.max_rel_loss_gap =
        std::max(rep.max_rel_loss_gap, std::abs(deep_loss - e2e_loss) / denom);
    if (t == iters) break;
    try {
      net = gd_step_deep(net, obj, GdConfig{eta, 0.0});
    } catch (const DivergenceError&) {
      rep.deep_diverged = true;
      break;
    }
    try {
      Matrix g = grad1(e2e.weights, obj);
      e2e = single_output ? e2e_step_single(e2e, g) : e2e_step_general(e2e, g);
    } catch (const DivergenceError&) {
      rep.e2e_diverged = true;
      break;
    }
  }
  return rep;
}

// Two-coordinate ill-conditioned quartic, coordinates decoupled:
// residual recursion delta <- delta * (1 - eta * delta^{p-2}) for plain GD
// on (1/p)(w - y)^p per coordinate.
inline double delta_recursion_step(double delta, double eta, int p) {
  return delta * (1.0 - eta * std::pow(delta, p - 2));
}

struct IllcondAccelerationReport {
  std::vector<std::string> warnings;
  double eta = 0.0;                   // 1 / (2 eps1 y1^2), the displayed choice
  double effective_rate = 0.0;        // 1 / (2 eps1 y1): what coordinate 2 experiences
  double first_step_rel_err = 0.0;    // |w1 - y1| / y1 after one collapsed step
  double per_step_max_dev = 0.0;      // worst |actual/predicted - 1| for coordinate 2
  long op_iters = 0;                  // collapsed-rule iterations to |w2 - y2| <= 1e-3
  double gd_rate = 0.0;               // largest stable plain-GD rate found
  long gd_iters = 0;                  // plain-GD iterations (possibly the cap)
  bool gd_iters_is_lower_bound = false;
  double acceleration_ratio = 0.0;    // gd_iters / op_iters
};

// Reproduces the concrete speed-up construction: a depth-2 collapsed
// network on targets (y1, y2) from start (eps1, eps2), quartic loss in the
// classical per-coordinate form. Plain GD is capped at 20x the collapsed
// iteration count; hitting the cap makes the ratio a lower bound.
inline IllcondAccelerationReport illcond_acceleration_report(double y1, double y2, double eps1,
                                                             double eps2) {
  if (!(y1 > 0.0) || !(y2 > 0.0) || !(eps1 > 0.0) || !(eps2 > 0.0))
    throw std::invalid_argument("illcond_acceleration_report: inputs must be positive");
  IllcondAccelerationReport rep;
  if (y1 < 10.0 * y2) rep.warnings.push_back("y1 not well separated from y2");
  if (y2 < 0.2 || y2 > 5.0) rep.warnings.push_back("y2 not of unit order");
  if (eps1 < 10.0 * eps2) rep.warnings.push_back("eps1 not well separated from eps2");
  if (eps1 * y1 < 5.0) rep.warnings.push_back("eps1 * y1 not large");
  double ratio_match = (eps1 / eps2) / (y1 / y2);
  if (ratio_match < 0.5 || ratio_match > 2.0)
    rep.warnings.push_back("eps1/eps2 does not track y1/y2");

  rep.eta = 1.0 / (2.0 * eps1 * y1 * y1);
  rep.effective_rate = 1.0 / (2.0 * eps1 * y1);
  double eta = rep.eta;

  // Collapsed depth-2 rule on w = (w1, w2), cubed-residual gradient:
  // w -= eta * ||w|| * (g + <g, w> w / ||w||^2).
  double w1 = eps1, w2 = eps2;
  auto op_step = [&]() {
    double norm = std::sqrt(w1 * w1 + w2 * w2);
    double g1 = std::pow(w1 - y1, 3);
    double g2 = std::pow(w2 - y2, 3);
    if (norm == 0.0) return;
    double mix = (g1 * w1 + g2 * w2) / (norm * norm);
    w1 -= eta * norm * (g1 + mix * w1);
    w2 -= eta * norm * (g2 + mix * w2);
  };

  op_step();
  rep.first_step_rel_err = std::abs(w1 - y1) / y1;

  // While coordinate 2 is still of target order, each of its steps should
  // look like plain GD at the effective rate.
  const long kOpCap = 200000000;
  long t = 1;
  for (; t < kOpCap && std::abs(w2 - y2) > 1e-3; ++t) {
    double before = w2;
    double predicted = -rep.effective_rate * std::pow(w2 - y2, 3);
    op_step();
    if (std::abs(w2 - y2) > 0.1 * y2 && t <= 10000 && predicted != 0.0)
      rep.per_step_max_dev =
          std::max(rep.per_step_max_dev, std::abs((w2 - before) / predicted - 1.0));
  }
  rep.op_iters = t;

  // Largest stable plain-GD rate below the fold at 2 / y1^2.
  for (double frac : {1.99, 1.95, 1.9, 1.8, 1.5, 1.0, 0.5}) {
    double cand = frac / (y1 * y1);
    double delta = -y1;
    bool stable = true;
    for (int s = 0; s < 200; ++s) {
      delta = delta_recursion_step(delta, cand, 4);
      if (!std::isfinite(delta) || std::abs(delta) > 1.5 * y1) {
        stable = false;
        break;
      }
    }
    if (stable) {
      rep.gd_rate = cand;
      break;
    }
  }
  if (rep.gd_rate == 0.0) throw NumericError("illcond_acceleration_report: no stable rate found");

  // Plain GD on the slow coordinate, capped at 20x the collapsed count.
  long cap = 20 * rep.op_iters;
  double delta2 = eps2 - y2;
  long s = 0;
  for (; s < cap && std::abs(delta2) > 1e-3; ++s)
    delta2 = delta_recursion_step(delta2, rep.gd_rate, 4);
  rep.gd_iters = s;
  rep.gd_iters_is_lower_bound = (s == cap);
  rep.acceleration_ratio = static_cast<double>(rep.gd_iters) / rep.op_iters;
  return rep;
}

}  // namespace dln
