#include <gtest/gtest.h>

#include <cmath>

#include "ssm/random.hpp"
#include "ssm/tensor.hpp"
#include "test_util.hpp"

namespace ssm {
namespace {

using ad::Shape;
using ad::Tape;
using ad::Var;
using testing::relative_error;

TEST(ForwardOps, DotOfSmallVectors) {
  Tape tape;
  const Var a = tape.constant(Vector{{1.0, 2.0, 3.0}});
  const Var b = tape.constant(Vector{{4.0, 5.0, 6.0}});
  EXPECT_DOUBLE_EQ(ad::dot(a, b).item(), 32.0);
}

TEST(ForwardOps, SoftplusAtZeroIsLog2) {
  Tape tape;
  EXPECT_NEAR(ad::softplus(tape.constant_scalar(0.0)).item(), std::log(2.0),
              1e-15);
}

TEST(ForwardOps, SoftplusStableForLargeInputs) {
  Tape tape;
  const Var x = tape.constant(Vector{{-800.0, 800.0}});
  const Vector y = ad::softplus(x).vector();
  EXPECT_EQ(y[0], 0.0);
  EXPECT_DOUBLE_EQ(y[1], 800.0);
}

TEST(ForwardOps, IdentityMatmul) {
  Tape tape;
  Matrix a(3, 3);
  a << 1, 2, 3, 4, 5, 6, 7, 8, 10;
  const Var out = ad::matmul(tape.constant_matrix(Matrix::Identity(3, 3)),
                             tape.constant_matrix(a));
  EXPECT_EQ(out.value(), a);
}

TEST(ForwardOps, ShapeMismatchNamesPrimitiveAndShapes) {
  Tape tape;
  const Var a = tape.constant_matrix(Matrix::Ones(2, 3));
  const Var b = tape.constant_matrix(Matrix::Ones(2, 3));
  try {
    ad::matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
  }
  EXPECT_THROW(ad::add(a, tape.constant(Vector::Ones(2))), ShapeError);
  EXPECT_THROW(ad::dot(tape.constant(Vector::Ones(2)),
                       tape.constant(Vector::Ones(3))),
               ShapeError);
}

TEST(ForwardOps, RowBroadcastOfVector) {
  Tape tape;
  Matrix a(2, 3);
  a << 1, 2, 3, 4, 5, 6;
  const Var out =
      ad::add(tape.constant_matrix(a), tape.constant(Vector{{10.0, 20.0, 30.0}}));
  Matrix expected(2, 3);
  expected << 11, 22, 33, 14, 25, 36;
  EXPECT_EQ(out.value(), expected);
}

TEST(ForwardOps, ReshapeIsColumnMajor) {
  Tape tape;
  const Var v = tape.constant(Vector{{1.0, 2.0, 3.0, 4.0, 5.0, 6.0}});
  const Var m = ad::reshape(v, Shape::matrix(2, 3));
  EXPECT_EQ(m.value()(1, 0), 2.0);
  EXPECT_EQ(m.value()(0, 2), 5.0);
}

TEST(Grad, SquareAtThree) {
  Tape tape;
  const Var x = tape.leaf_scalar(3.0);
  EXPECT_DOUBLE_EQ(tape.grad(ad::mul(x, x), x).item(), 6.0);
}

TEST(Grad, SumGivesOnes) {
  Tape tape;
  const Var x = tape.leaf(Vector::LinSpaced(5, -1.0, 1.0));
  EXPECT_EQ(tape.grad(ad::sum(x), x).vector(), Vector::Ones(5));
}

TEST(Grad, NonScalarOutputRejected) {
  Tape tape;
  const Var x = tape.leaf(Vector::Ones(3));
  EXPECT_THROW(tape.grad(x, x), ShapeError);
}

TEST(Grad, UnreachableLeafIsExactlyZero) {
  Tape tape;
  const Var x = tape.leaf(Vector::Ones(3));
  const Var y = tape.leaf(Vector{{1.0, 2.0}});
  const Var out = ad::sum(ad::square(x));
  const Var wrt[] = {x, y};
  const auto g = tape.grad(out, wrt);
  EXPECT_EQ(g[1].vector(), Vector::Zero(2));
  EXPECT_EQ(g[0].vector(), Vector::Constant(3, 2.0));
}

TEST(Grad, CountsOnePassPerCall) {
  Tape tape;
  const Var x = tape.leaf(Vector::Ones(2));
  const Var f = ad::sum(ad::exp(x));
  tape.grad(f, x);
  tape.grad(f, x);
  EXPECT_EQ(tape.backward_passes(), 2U);
  tape.reset_backward_passes();
  EXPECT_EQ(tape.backward_passes(), 0U);
}

TEST(Grad, WithoutCreateGraphLeavesTapeCompact) {
  Tape tape;
  const Var x = tape.leaf(Vector::Ones(4));
  const Var f = ad::sum(ad::tanh(ad::square(x)));
  const std::size_t before = tape.size();
  const Var g = tape.grad(f, x);
  EXPECT_EQ(tape.size(), before + 1);
  EXPECT_FALSE(g.requires_grad());
}

TEST(Grad, CreateGraphAllowsSecondDerivative) {
  Tape tape;
  const Var x = tape.leaf_scalar(0.7);
  const Var f = ad::mul(ad::mul(x, x), x);
  const Var g = tape.grad(f, x, /*create_graph=*/true);
  EXPECT_NEAR(g.item(), 3 * 0.49, 1e-15);
  EXPECT_NEAR(tape.grad(g, x).item(), 6 * 0.7, 1e-14);
}

// f(x) = w2 . softplus(W1 x + b1), evaluated directly with Eigen.
double two_layer_softplus(const Matrix& w1, const Vector& b1, const Vector& w2,
                          const Vector& x) {
  const Vector pre = w1 * x + b1;
  double out = 0.0;
  for (Index i = 0; i < pre.size(); ++i) {
    out += w2[i] * std::log1p(std::exp(pre[i]));
  }
  return out;
}

TEST(Grad, TwoLayerSoftplusMatchesFiniteDifferences) {
  const Matrix w1 = standard_normal(6, 4, 11, 0);
  const Vector b1 = standard_normal(6, 1, 11, 1);
  const Vector w2 = standard_normal(6, 1, 11, 2);
  const Vector x0 = standard_normal(4, 1, 11, 3);

  Tape tape;
  const Var x = tape.leaf(x0);
  const Var hidden = ad::add(ad::matvec(tape.constant_matrix(w1), x),
                             tape.constant(b1));
  const Var f = ad::dot(tape.constant(w2), ad::softplus(hidden));
  EXPECT_NEAR(f.item(), two_layer_softplus(w1, b1, w2, x0), 1e-12);

  const Vector autodiff = tape.grad(f, x).vector();
  const Vector numeric = testing::numeric_gradient(
      [&](const Vector& p) { return two_layer_softplus(w1, b1, w2, p); }, x0,
      1e-5);
  EXPECT_LE(relative_error(autodiff, numeric), 1e-6);
}

// Every primitive's backward rule against finite differences through a
// composite expression that touches it.
TEST(Grad, PrimitiveRulesMatchFiniteDifferences) {
  const Matrix a0 = standard_normal(3, 2, 5, 0);
  const Vector u0 = Vector{{0.3, -0.4}};

  auto build = [&](Tape& tape, const Var& a, const Var& u) {
    const Var t1 = ad::matvec(a, u);                          // [3]
    const Var t2 = ad::sigmoid(ad::add_scalar(t1, 0.1));      // [3]
    const Var t3 = ad::outer(t2, u);                          // [3,2]
    const Var t4 = ad::mul(ad::transpose(ad::transpose(a)), t3);
    const Var t5 = ad::sum_axis0(ad::tanh(t4));               // [2]
    const Var t6 = ad::sum_axis1(ad::exp(ad::scale(a, 0.5))); // [3]
    const Var t7 = ad::log(ad::add_scalar(ad::square(t6), 1.0));
    const Var t8 = ad::reciprocal(ad::add_scalar(ad::softplus(t5), 1.0));
    const Var t9 = ad::sub(ad::expand_axis0(t8, 3), ad::expand_axis1(t7, 2));
    const Var t10 = ad::pad(ad::slice(ad::reshape(t9, ad::Shape::vector(6)), 1, 4), 2, 7);
    const Var t11 = ad::matmul(ad::transpose(a), ad::neg(a));   // [2,2]
    const Var t12 = ad::mul(ad::broadcast(ad::sum(u), ad::Shape::matrix(2, 2)), t11);
    return ad::add(ad::dot(t10, t10), ad::sum(t12));
  };

  Tape tape;
  const Var a = tape.leaf_matrix(a0);
  const Var u = tape.leaf(u0);
  const Var wrt[] = {a, u};
  const auto g = tape.grad(build(tape, a, u), wrt);

  auto value = [&](const Matrix& am, const Vector& uv) {
    Tape t;
    return build(t, t.constant_matrix(am), t.constant(uv)).item();
  };
  const Vector flat_a = a0.reshaped();
  const Vector ga = testing::numeric_gradient(
      [&](const Vector& p) { return value(p.reshaped(3, 2), u0); }, flat_a);
  const Vector gu = testing::numeric_gradient(
      [&](const Vector& p) { return value(a0, p); }, u0);
  EXPECT_LE(relative_error(g[0].value().reshaped(), ga), 1e-7);
  EXPECT_LE(relative_error(g[1].vector(), gu), 1e-7);
}

TEST(Grad, GatherScatterAreAdjoint) {
  const auto idx = ad::make_index_list({4, 0, 3});
  const Matrix a0 = standard_normal(2, 3, 8, 0);
  auto build = [&](Tape&, const Var& a) {
    const Var g = ad::gather(ad::square(a), idx);
    const Var s = ad::scatter(ad::exp(g), idx, ad::Shape::matrix(3, 2));
    return ad::sum(ad::mul(s, s));
  };
  Tape tape;
  const Var a = tape.leaf_matrix(a0);
  const Matrix analytic = tape.grad(build(tape, a), a).value();
  const Vector numeric = testing::numeric_gradient(
      [&](const Vector& p) {
        Tape t;
        return build(t, t.constant_matrix(p.reshaped(2, 3))).item();
      },
      a0.reshaped());
  EXPECT_LE(relative_error(analytic.reshaped(), numeric), 1e-7);
  EXPECT_EQ(analytic(1, 0), 0.0);  // flat position 1 is never gathered
  EXPECT_THROW(ad::gather(a, ad::make_index_list({6})), ShapeError);
}

}  // namespace
}  // namespace ssm
