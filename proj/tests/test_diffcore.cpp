#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "rarl/diffcore.hpp"

using namespace rarl;

namespace {

Parameter rand_param(const std::string& name, Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (double& v : t.data()) v = u(rng);
  return Parameter{name, t, true};
}

double fd_error(const ScalarGraph& f, std::vector<Parameter*> ps) {
  const FdReport r = finite_diff_check(f, std::span<Parameter* const>(ps));
  EXPECT_FALSE(r.excluded);
  EXPECT_GT(r.checked, 0u);
  return r.max_rel_error;
}

}  // namespace

TEST(Tensor, ShapesAndAccess) {
  Tensor s = Tensor::scalar(2.5);
  EXPECT_TRUE(s.is_scalar());
  EXPECT_EQ(s.item(), 2.5);
  Tensor m = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  EXPECT_EQ(m(1, 2), 6.0);
  EXPECT_EQ(m.row(1)[0], 4.0);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(m.item(), ShapeError);
}

TEST(Tape, ElementwiseValues) {
  Tape t;
  Var a = t.constant(Tensor::vector({1.0, 4.0}));
  Var b = t.constant(Tensor::vector({2.0, 0.5}));
  EXPECT_EQ(add(a, b).value(), Tensor::vector({3.0, 4.5}));
  EXPECT_EQ(sub(a, b).value(), Tensor::vector({-1.0, 3.5}));
  EXPECT_EQ(mul(a, b).value(), Tensor::vector({2.0, 2.0}));
  EXPECT_EQ(div(a, b).value(), Tensor::vector({0.5, 8.0}));
  EXPECT_EQ(sqrt(a).value(), Tensor::vector({1.0, 2.0}));
  EXPECT_NEAR(sigmoid(t.constant(Tensor::scalar(0.0))).item(), 0.5, 1e-15);
  EXPECT_NEAR(sigmoid(t.constant(Tensor::scalar(-800.0))).item(), 0.0, 1e-300);
  EXPECT_EQ(relu(t.constant(Tensor::vector({-1.0, 2.0}))).value(), Tensor::vector({0.0, 2.0}));
  EXPECT_EQ(clamp(t.constant(Tensor::vector({-1.0, 0.5, 3.0})), 0.0, 1.0).value(), Tensor::vector({0.0, 0.5, 1.0}));
}

TEST(Tape, ScalarBroadcast) {
  Tape t;
  Var s = t.constant(Tensor::scalar(2.0));
  Var m = t.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  EXPECT_EQ(mul(s, m).value(), Tensor::matrix(2, 2, {2, 4, 6, 8}));
  EXPECT_THROW(add(m, t.constant(Tensor::vector({1, 2, 3}))), ShapeError);
}

TEST(Tape, DomainErrorsCarryIndex) {
  Tape t;
  try {
    log(t.constant(Tensor::vector({1.0, 2.0, 0.0})));
    FAIL() << "log(0) accepted";
  } catch (const DomainError& e) {
    EXPECT_EQ(e.index(), 2u);
  }
  try {
    l2_normalize_rows(t.constant(Tensor::matrix(2, 2, {1, 0, 0, 0})));
    FAIL() << "zero row accepted";
  } catch (const DomainError& e) {
    EXPECT_EQ(e.index(), 1u);
  }
  EXPECT_THROW(div(t.constant(Tensor::scalar(1)), t.constant(Tensor::scalar(0))), DomainError);
}

TEST(Tape, MisuseIsRejected) {
  Parameter p{"p", Tensor::vector({1.0, 2.0})};
  Tape t;
  Var v = t.param(p);
  EXPECT_THROW(t.backward(v), ShapeError);
  Var l = sum(v);
  t.backward(l);
  EXPECT_THROW(t.backward(l), TapeError);
  Tape other;
  Var w = other.constant(Tensor::vector({1.0, 1.0}));
  EXPECT_THROW(add(v, w), TapeError);
}

TEST(Tape, ParameterRegisteredOnce) {
  Parameter p{"p", Tensor::scalar(3.0)};
  Tape t;
  Var a = t.param(p), b = t.param(p);
  EXPECT_EQ(a.id(), b.id());
  GradMap g = t.backward(mul(a, b));
  ASSERT_EQ(g.size(), 1u);
  EXPECT_DOUBLE_EQ(g[0].grad.item(), 6.0);
}

TEST(Tape, ConstantsGetNoGradient) {
  Parameter p{"p", Tensor::vector({1.0, 2.0})};
  Tape t;
  Var c = t.constant(Tensor::vector({5.0, 7.0}));
  Var l = sum(mul(t.param(p), c));
  const GradMap g = t.backward(l);
  EXPECT_EQ(t.grad(c), nullptr);
  EXPECT_EQ(*find_grad(g, p), Tensor::vector({5.0, 7.0}));
}

TEST(Tape, UnusedParameterAbsentFromGrads) {
  Parameter p{"p", Tensor::scalar(1.0)}, q{"q", Tensor::scalar(1.0)};
  Tape t;
  t.param(q);
  const GradMap g = t.backward(scale(t.param(p), 2.0));
  EXPECT_NE(find_grad(g, p), nullptr);
  EXPECT_EQ(find_grad(g, q), nullptr);
}

TEST(Gradients, ElementwiseAndReductions) {
  Parameter a = rand_param("a", {3, 4}, 1, 0.2, 2.0);
  Parameter b = rand_param("b", {3, 4}, 2, 0.2, 2.0);
  auto f = [&](Tape& t) {
    Var x = t.param(a), y = t.param(b);
    Var e = add(mul(x, y), div(x, y));
    e = sub(e, sqrt(x));
    e = add(e, log(y));
    e = add(e, exp(scale(x, 0.3)));
    e = add(e, tanh(shift(y, -1.0)));
    e = add(e, sigmoid(neg(x)));
    return add(mean(e), sum(e));
  };
  EXPECT_LT(fd_error(f, {&a, &b}), 1e-6);
}

TEST(Gradients, MatrixOps) {
  Parameter a = rand_param("a", {3, 4}, 3), b = rand_param("b", {4, 2}, 4), r = rand_param("r", {2}, 5);
  Parameter c = rand_param("c", {3, 2}, 6);
  auto f = [&](Tape& t) {
    Var m = add_rowvec(matmul(t.param(a), t.param(b)), t.param(r));
    Var n = transpose(mul(m, t.param(c)));
    Var k = concat_rows({n, transpose(t.param(c))});
    return add(sum(l2_norm_rows(k)), sum(row_dot(m, t.param(c))));
  };
  EXPECT_LT(fd_error(f, {&a, &b, &r, &c}), 1e-7);
}

TEST(Gradients, NormalizeSoftmaxPick) {
  Parameter a = rand_param("a", {4, 5}, 7, -2.0, 2.0);
  const std::vector<std::size_t> cols{0, 2, 3};
  auto f = [&](Tape& t) {
    Var z = l2_normalize_rows(t.param(a));
    Var ls = log_softmax_masked(scale(z, 3.0), cols);
    Var p = softmax_masked(z, all_columns(5));
    return add(mean(pick(ls, {0, 1, 2, 1})), inner(p, p));
  };
  EXPECT_LT(fd_error(f, {&a}), 1e-7);
}

TEST(Gradients, SoftmaxMaskedIgnoresOtherColumns) {
  Tape t;
  Var a = t.constant(Tensor::matrix(1, 3, {1.0, 100.0, 2.0}));
  const Tensor p = softmax_masked(a, {0, 2}).value();
  EXPECT_EQ(p.cols(), 2u);
  EXPECT_NEAR(p[0], 1.0 / (1.0 + std::exp(1.0)), 1e-15);
}

TEST(Gradients, ClampAndReluInterior) {
  Parameter a = rand_param("a", {6}, 8, 0.05, 0.9);
  auto f = [&](Tape& t) { return sum(mul(relu(t.param(a)), clamp(t.param(a), 0.0, 1.0))); };
  EXPECT_LT(fd_error(f, {&a}), 1e-7);
}

TEST(FiniteDiff, KinkCrossingIsExcluded) {
  Parameter a{"a", Tensor::vector({1e-6, 0.5})};
  auto f = [&](Tape& t) { return sum(relu(t.param(a))); };
  std::vector<Parameter*> ps{&a};
  EXPECT_TRUE(finite_diff_check(f, std::span<Parameter* const>(ps)).excluded);
}

TEST(FiniteDiff, DetectsWrongGradient) {
  Parameter a{"a", Tensor::vector({0.3, -0.7})};
  auto f = [&](Tape& t) {
    Var x = t.param(a);
    Var y = mul(x, x);
    // identity forward, doubled backward
    Var bad = t.record(y.value(), {y}, [](BackwardContext& c) {
      Tensor* g = c.in_grad(0);
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += 2.0 * c.out_grad()[i];
    });
    return sum(bad);
  };
  std::vector<Parameter*> ps{&a};
  const FdReport r = finite_diff_check(f, std::span<Parameter* const>(ps));
  EXPECT_GT(r.max_rel_error, 0.1);
  EXPECT_EQ(r.worst_param, "a");
}

TEST(FiniteDiff, NonFiniteNamesCoordinate) {
  Parameter a{"a", Tensor::vector({0.1, 0.7097})};
  auto f = [&](Tape& t) { return sum(exp(scale(t.param(a), 1000.0))); };  // overflows just above a[1]
  std::vector<Parameter*> ps{&a};
  try {
    finite_diff_check(f, std::span<Parameter* const>(ps));
    FAIL();
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("a[1]"), std::string::npos);
  }
  EXPECT_EQ(a.value[1], 0.7097);  // restored
}

// Property: gradients of random compositions agree with central differences.
TEST(Gradients, RandomCompositionsProperty) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Parameter a = rand_param("a", {3, 3}, 100 + s, 0.1, 1.5);
    Parameter b = rand_param("b", {3, 3}, 200 + s, -1.0, 1.0);
    auto f = [&](Tape& t) {
      Var x = t.param(a), y = t.param(b);
      Var z = matmul(l2_normalize_rows(x), transpose(y));
      return add(mean(tanh(z)), scale(sum(log(shift(sigmoid(z), 0.5))), 0.2));
    };
    EXPECT_LT(fd_error(f, {&a, &b}), 1e-6) << "seed " << s;
  }
}

TEST(Examples, ForwardBasics) {
  Tape t;
  const Tensor n = l2_normalize_rows(t.constant(Tensor::matrix(1, 2, {3, 4}))).value();
  EXPECT_NEAR(n[0], 0.6, 1e-15);
  EXPECT_NEAR(n[1], 0.8, 1e-15);
  const Tensor p = softmax_masked(t.constant(Tensor::matrix(1, 2, {0.7, 0.7})), {0, 1}).value();
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
  EXPECT_EQ(inner(t.constant(Tensor::vector({1, 0})), t.constant(Tensor::vector({0, 1}))).item(), 0.0);
}

TEST(Examples, BackwardBasics) {
  {
    Parameter x{"x", Tensor::scalar(3.0)};
    Tape t;
    Var v = t.param(x);
    EXPECT_DOUBLE_EQ(find_grad(t.backward(mul(v, v)), x)->item(), 6.0);
  }
  {
    Parameter x{"x", Tensor::scalar(0.0)};
    Tape t;
    EXPECT_DOUBLE_EQ(find_grad(t.backward(sigmoid(t.param(x))), x)->item(), 0.25);
  }
  {
    // -log softmax_0 with equal logits: d/dl0 = p0 - 1 = -0.5, d/dl1 = p1 = 0.5
    Parameter l{"l", Tensor::matrix(1, 2, {0.3, 0.3})};
    Tape t;
    const Tensor g = *find_grad(t.backward(neg(sum(pick(log_softmax_masked(t.param(l), {0, 1}), {0})))), l);
    EXPECT_NEAR(g[0], -0.5, 1e-15);
    EXPECT_NEAR(g[1], 0.5, 1e-15);
    std::vector<Parameter*> ps{&l};
    const FdReport r = finite_diff_check(
        [&](Tape& tt) { return neg(sum(pick(log_softmax_masked(tt.param(l), {0, 1}), {0}))); },
        std::span<Parameter* const>(ps));
    EXPECT_LT(r.max_rel_error, 1e-9);
  }
}

TEST(Examples, QuadraticIsExactUnderCentralDifferences) {
  Parameter a = rand_param("a", {5}, 9);
  std::vector<Parameter*> ps{&a};
  const FdReport r = finite_diff_check(
      [&](Tape& t) {
        Var x = t.param(a);
        return add(sum(mul(x, x)), scale(sum(x), 3.0));
      },
      std::span<Parameter* const>(ps));
  EXPECT_LT(r.max_rel_error, 1e-9);
}

TEST(Examples, ClampKinkIsExcluded) {
  Parameter a{"a", Tensor::vector({0.5, 1.0 - 1e-6})};
  std::vector<Parameter*> ps{&a};
  const FdReport r =
      finite_diff_check([&](Tape& t) { return sum(clamp(t.param(a), 0.0, 1.0)); }, std::span<Parameter* const>(ps));
  EXPECT_TRUE(r.excluded);
}

TEST(Properties, NormalizeGradientOrthogonalToInput) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int k = 0; k < 50; ++k) {
    Parameter v = rand_param("v", {1, 6}, 300 + k, -2.0, 2.0);
    Tensor up(Shape{1, 6});
    for (double& x : up.data()) x = g(rng);
    Tape t;
    Var n = l2_normalize_rows(t.param(v));
    const Tensor grad = *find_grad(t.backward(sum(mul(n, t.constant(up)))), v);
    double dot = 0.0;
    for (std::size_t i = 0; i < 6; ++i) dot += grad[i] * v.value[i];
    EXPECT_NEAR(dot, 0.0, 1e-8);
  }
}

TEST(Properties, BitIdenticalReruns) {
  Parameter a = rand_param("a", {4, 3}, 21), b = rand_param("b", {3, 2}, 22);
  auto once = [&] {
    Tape t;
    Var l = mean(tanh(matmul(l2_normalize_rows(t.param(a)), t.param(b))));
    const GradMap g = t.backward(l);
    return std::pair{l.item(), find_grad(g, a)->checksum() ^ find_grad(g, b)->checksum()};
  };
  EXPECT_EQ(once(), once());
}
