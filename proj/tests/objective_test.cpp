#include "dln/objective.hpp"

#include <cmath>

#include <gtest/gtest.h>

#include "dln/rng.hpp"
#include "oracles.hpp"

using dln::Dataset;
using dln::LinearNetwork;
using dln::LpObjective;
using dln::Matrix;

namespace {

Dataset axis_pair(double y1, double y2) {
  Dataset d;
  d.x = Matrix(2, 2, {1, 0, 0, 1});
  d.y = Matrix(2, 1, {y1, y2});
  return d;
}

Dataset random_regression(int m, int d, int k, dln::Rng& rng) {
  Dataset data;
  data.x = dln::gaussian_matrix(m, d, 1.0, rng);
  data.y = dln::gaussian_matrix(m, k, 1.0, rng);
  return data;
}

}  // namespace

TEST(LpObjective, ValidatesShapeAndExponent) {
  Dataset d = axis_pair(1, 2);
  EXPECT_NO_THROW(LpObjective(d, 2));
  EXPECT_NO_THROW(LpObjective(d, 4));
  EXPECT_THROW(LpObjective(d, 3), std::invalid_argument);
  EXPECT_THROW(LpObjective(d, 0), std::invalid_argument);

  Dataset multi;
  multi.x = Matrix(2, 2, {1, 0, 0, 1});
  multi.y = Matrix(2, 2, {1, 0, 0, 1});
  EXPECT_NO_THROW(LpObjective(multi, 2));
  EXPECT_THROW(LpObjective(multi, 4), std::invalid_argument);

  Dataset mismatched;
  mismatched.x = Matrix(2, 2);
  mismatched.y = Matrix(3, 1);
  EXPECT_THROW(LpObjective(mismatched, 2), std::invalid_argument);
}

TEST(Loss1, HandValues) {
  // Single example, quartic: (1/1) * (1/4) * (0 - 3)^4.
  Dataset single;
  single.x = Matrix(1, 2, {1, 0});
  single.y = Matrix(1, 1, {3});
  LpObjective quartic(single, 4);
  Matrix w(1, 2);
  EXPECT_DOUBLE_EQ(dln::loss1(w, quartic), 20.25);

  // Interpolating weights give zero for any even p.
  LpObjective pair2(axis_pair(5, -2), 2);
  LpObjective pair6(axis_pair(5, -2), 6);
  Matrix exact(1, 2, {5, -2});
  EXPECT_DOUBLE_EQ(dln::loss1(exact, pair2), 0.0);
  EXPECT_DOUBLE_EQ(dln::loss1(exact, pair6), 0.0);

  // Multi-output quadratic: residual rows (1,1) and (-1,2).
  Dataset multi;
  multi.x = Matrix(2, 1, {1, 1});
  multi.y = Matrix(2, 2, {0, 0, 2, -1});
  LpObjective obj(multi, 2);
  Matrix wm(2, 1, {1, 1});
  EXPECT_DOUBLE_EQ(dln::loss1(wm, obj), 0.5 * (0.5 * 2.0 + 0.5 * 5.0));
}

TEST(Grad1, HandValuesAndFiniteDifference) {
  Dataset single;
  single.x = Matrix(1, 2, {1, 0});
  single.y = Matrix(1, 1, {3});
  LpObjective quartic(single, 4);
  Matrix w(1, 2);
  Matrix g = dln::grad1(w, quartic);
  EXPECT_DOUBLE_EQ(g(0, 0), -27.0);
  EXPECT_DOUBLE_EQ(g(0, 1), 0.0);

  dln::Rng rng(73);
  for (int p : {2, 4, 6}) {
    Dataset data = random_regression(7, 3, 1, rng);
    LpObjective obj(data, p);
    Matrix at = dln::gaussian_matrix(1, 3, 0.8, rng);
    Matrix analytic = dln::grad1(at, obj);
    Matrix numeric =
        oracle::fd_gradient([&](const Matrix& m) { return dln::loss1(m, obj); }, at);
    EXPECT_LE(oracle::max_abs_diff(analytic, numeric),
              1e-6 * std::max(1.0, analytic.max_abs()));
  }

  Dataset multi = random_regression(6, 4, 3, rng);
  LpObjective obj2(multi, 2);
  Matrix at2 = dln::gaussian_matrix(3, 4, 0.8, rng);
  Matrix numeric2 =
      oracle::fd_gradient([&](const Matrix& m) { return dln::loss1(m, obj2); }, at2);
  EXPECT_LE(oracle::max_abs_diff(dln::grad1(at2, obj2), numeric2), 1e-6);
}

TEST(Grad1, ZeroAtInterpolator) {
  LpObjective obj(axis_pair(5, -2), 4);
  Matrix exact(1, 2, {5, -2});
  EXPECT_EQ(dln::grad1(exact, obj).max_abs(), 0.0);
}

TEST(LossN, SameCodePathAsCollapsedLoss) {
  dln::Rng rng(79);
  Dataset data = random_regression(5, 4, 2, rng);
  LpObjective obj(data, 2);
  LinearNetwork net = dln::init_gaussian({4, 3, 2}, 0.6, 83);
  // Bit-for-bit equality: lossN is literally loss1 of the collapsed matrix.
  EXPECT_EQ(dln::lossN(net, obj), dln::loss1(dln::end_to_end(net), obj));
}

TEST(LayerGrads, SingleLayerEqualsGrad1) {
  dln::Rng rng(89);
  Dataset data = random_regression(5, 3, 2, rng);
  LpObjective obj(data, 2);
  LinearNetwork net = dln::init_gaussian({3, 2}, 0.5, 97);
  auto grads = dln::layer_grads(net, obj);
  ASSERT_EQ(grads.size(), 1u);
  EXPECT_EQ(oracle::max_abs_diff(grads[0], dln::grad1(net.weights[0], obj)), 0.0);
}

TEST(LayerGrads, MatchesFiniteDifferencePerLayer) {
  dln::Rng rng(101);
  Dataset data = random_regression(6, 3, 2, rng);
  for (int p : {2}) {
    LpObjective obj(data, p);
    LinearNetwork net = dln::init_gaussian({3, 4, 2, 2}, 0.7, 103);
    auto grads = dln::layer_grads(net, obj);
    ASSERT_EQ(grads.size(), 3u);
    for (int layer = 0; layer < 3; ++layer) {
      LinearNetwork probe = net;
      Matrix numeric = oracle::fd_gradient(
          [&](const Matrix& m) {
            probe.weights[layer] = m;
            return dln::lossN(probe, obj);
          },
          net.weights[layer]);
      EXPECT_LE(oracle::max_abs_diff(grads[layer], numeric), 1e-6);
    }
  }

  // Scalar-output quartic network.
  Dataset sdata = random_regression(6, 3, 1, rng);
  LpObjective sobj(sdata, 4);
  LinearNetwork snet = dln::init_gaussian({3, 2, 1}, 0.7, 107);
  auto sgrads = dln::layer_grads(snet, sobj);
  for (int layer = 0; layer < 2; ++layer) {
    LinearNetwork probe = snet;
    Matrix numeric = oracle::fd_gradient(
        [&](const Matrix& m) {
          probe.weights[layer] = m;
          return dln::lossN(probe, sobj);
        },
        snet.weights[layer]);
    EXPECT_LE(oracle::max_abs_diff(sgrads[layer], numeric), 1e-6);
  }
}

TEST(LayerGrads, ZeroGradientPropagates) {
  LpObjective obj(axis_pair(2, 3), 2);
  LinearNetwork net;
  net.widths = {2, 2, 1};
  net.weights = {Matrix(2, 2, {2, 0, 0, 3}), Matrix(1, 2, {1, 1})};
  // end-to-end = (2, 3) interpolates, so every layer gradient vanishes.
  ASSERT_EQ(dln::grad1(dln::end_to_end(net), obj).max_abs(), 0.0);
  for (const Matrix& g : dln::layer_grads(net, obj)) EXPECT_EQ(g.max_abs(), 0.0);
}

TEST(ReferenceOptimum, ClosedFormQuadratic) {
  dln::Rng rng(109);
  Dataset data = random_regression(20, 4, 2, rng);
  LpObjective obj(data, 2);
  dln::Optimum opt = dln::reference_optimum(obj);
  // Normal equations: X^T (X w*^T - Y) = 0.
  Matrix residual = data.x.transposed() * (data.x * opt.w.transposed() - data.y);
  EXPECT_LE(residual.max_abs(), 1e-8);

  // Spot-check optimality against random candidates.
  for (int t = 0; t < 100; ++t) {
    Matrix cand = opt.w + dln::gaussian_matrix(2, 4, 0.3, rng);
    EXPECT_LE(opt.loss, dln::loss1(cand, obj) + 1e-12);
  }
}

TEST(ReferenceOptimum, AxisPairIsExactForAnyEvenP) {
  for (int p : {2, 4, 6}) {
    LpObjective obj(axis_pair(10, 1), p);
    dln::Optimum opt = dln::reference_optimum(obj);
    // The stop rule is on the gradient; residuals can be as large as
    // (m * tol)^(1/(p-1)) where the loss is that flat.
    double wtol = std::pow(2.0 * 1e-10, 1.0 / (p - 1)) + 1e-9;
    EXPECT_NEAR(opt.w(0, 0), 10.0, wtol);
    EXPECT_NEAR(opt.w(0, 1), 1.0, wtol);
    EXPECT_LE(opt.loss, 1e-12);
    EXPECT_LE(dln::grad1(opt.w, obj).frobenius_norm(), 1e-10);
  }
}

TEST(ReferenceOptimum, QuarticGradientBelowTolerance) {
  dln::Rng rng(113);
  Dataset data = random_regression(30, 5, 1, rng);
  LpObjective obj(data, 4);
  dln::Optimum opt = dln::reference_optimum(obj);
  EXPECT_LE(dln::grad1(opt.w, obj).frobenius_norm(), 1e-10);
  for (int t = 0; t < 100; ++t) {
    Matrix cand = opt.w + dln::gaussian_matrix(1, 5, 0.2, rng);
    EXPECT_LE(opt.loss, dln::loss1(cand, obj) + 1e-12);
  }
}
