#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gplab/autodiff.hpp"
#include "test_util.hpp"

using namespace gplab;
using ad::Tape;
using ad::Var;

namespace {

Mat fixed_mat(int r, int c, std::uint64_t seed, double offset = 0.0) {
  Rng rng(seed);
  Mat m = gaussian(r, c, rng);
  if (offset != 0.0) m = (m.array().abs() + offset).matrix();
  return m;
}

// Tape gradient of sum(W .* f(x)) for a unary tape op vs central differences.
void check_unary(const std::function<Var(Tape&, Var)>& op, const Mat& x0,
                 double tol = 1e-5) {
  Mat w = fixed_mat(0, 0, 0);  // placeholder, replaced below
  {
    Tape probe;
    Var x = probe.constant(x0);
    Var y = op(probe, x);
    w = fixed_mat(static_cast<int>(probe.val(y).rows()),
                  static_cast<int>(probe.val(y).cols()), 99);
  }
  auto value = [&](const Mat& xv) {
    Tape t;
    Var x = t.constant(xv);
    Var y = op(t, x);
    return (t.val(y).cwiseProduct(w)).sum();
  };
  Tape t;
  Var x = t.param(x0);
  Var loss = t.sum_all(t.mul(op(t, x), t.constant(w)));
  t.backward(loss);
  CHECK(tu::max_rel_err(t.grad(x), tu::fd_grad(x0, value)) < tol);
}

// Both-side gradients of a binary op under broadcasting.
void check_binary(const std::function<Var(Tape&, Var, Var)>& op, const Mat& a0,
                  const Mat& b0, double tol = 1e-5) {
  Mat w;
  {
    Tape probe;
    Var y = op(probe, probe.constant(a0), probe.constant(b0));
    w = fixed_mat(static_cast<int>(probe.val(y).rows()),
                  static_cast<int>(probe.val(y).cols()), 123);
  }
  auto value_a = [&](const Mat& av) {
    Tape t;
    Var y = op(t, t.constant(av), t.constant(b0));
    return (t.val(y).cwiseProduct(w)).sum();
  };
  auto value_b = [&](const Mat& bv) {
    Tape t;
    Var y = op(t, t.constant(a0), t.constant(bv));
    return (t.val(y).cwiseProduct(w)).sum();
  };
  Tape t;
  Var a = t.param(a0);
  Var b = t.param(b0);
  Var loss = t.sum_all(t.mul(op(t, a, b), t.constant(w)));
  t.backward(loss);
  CHECK(tu::max_rel_err(t.grad(a), tu::fd_grad(a0, value_a)) < tol);
  CHECK(tu::max_rel_err(t.grad(b), tu::fd_grad(b0, value_b)) < tol);
}

}  // namespace

TEST_CASE("elementwise ops match finite differences under all broadcast shapes") {
  Mat a = fixed_mat(3, 4, 1);
  std::vector<Mat> bs = {fixed_mat(3, 4, 2, 0.5), fixed_mat(1, 4, 3, 0.5),
                         fixed_mat(3, 1, 4, 0.5), fixed_mat(1, 1, 5, 0.5)};
  for (const Mat& b : bs) {
    check_binary([](Tape& t, Var x, Var y) { return t.add(x, y); }, a, b);
    check_binary([](Tape& t, Var x, Var y) { return t.sub(x, y); }, a, b);
    check_binary([](Tape& t, Var x, Var y) { return t.mul(x, y); }, a, b);
    check_binary([](Tape& t, Var x, Var y) { return t.div(x, y); }, a, b);
  }
}

TEST_CASE("elementwise shape mismatch raises a dimension error") {
  Tape t;
  Var a = t.param(fixed_mat(3, 4, 1));
  Var b = t.param(fixed_mat(2, 4, 2));
  CHECK_THROWS_AS((void)t.add(a, b), DimensionError);
  CHECK_THROWS_AS((void)t.mul(a, b), DimensionError);
}

TEST_CASE("matmul gradients match finite differences") {
  check_binary([](Tape& t, Var x, Var y) { return t.matmul(x, y); }, fixed_mat(3, 4, 6),
               fixed_mat(4, 5, 7));
  Tape t;
  CHECK_THROWS_AS((void)t.matmul(t.param(fixed_mat(3, 4, 1)), t.param(fixed_mat(3, 5, 2))),
                  DimensionError);
}

TEST_CASE("spmm gradient matches finite differences") {
  ad::SpMat s(4, 3);
  std::vector<Eigen::Triplet<double>> trips = {
      {0, 0, 1.5}, {1, 2, -0.7}, {2, 1, 2.0}, {3, 0, 0.3}, {3, 2, 1.1}};
  s.setFromTriplets(trips.begin(), trips.end());
  Mat b0 = fixed_mat(3, 5, 8);
  Mat w = fixed_mat(4, 5, 9);
  auto value = [&](const Mat& bv) {
    Tape t;
    Var y = t.spmm(s, t.constant(bv));
    return (t.val(y).cwiseProduct(w)).sum();
  };
  Tape t;
  Var b = t.param(b0);
  Var loss = t.sum_all(t.mul(t.spmm(s, b), t.constant(w)));
  t.backward(loss);
  CHECK(tu::max_rel_err(t.grad(b), tu::fd_grad(b0, value)) < 1e-5);
}

TEST_CASE("scalar and pointwise nonlinearities match finite differences") {
  Mat x = fixed_mat(3, 4, 10);           // entries bounded away from 0
  Mat xpos = fixed_mat(3, 4, 11, 0.5);   // strictly positive
  check_unary([](Tape& t, Var a) { return t.scale(a, -2.5); }, x);
  check_unary([](Tape& t, Var a) { return t.add_scalar(a, 3.0); }, x);
  check_unary([](Tape& t, Var a) { return t.relu(a); }, x);
  check_unary([](Tape& t, Var a) { return t.leaky_relu(a, 0.2); }, x);
  check_unary([](Tape& t, Var a) { return t.sigmoid(a); }, x);
  check_unary([](Tape& t, Var a) { return t.exp(a); }, x);
  check_unary([](Tape& t, Var a) { return t.log(a); }, xpos);
  check_unary([](Tape& t, Var a) { return t.pow(a, 1.7); }, xpos);
  check_unary([](Tape& t, Var a) { return t.pow(a, 2.0); }, xpos);
}

TEST_CASE("shape ops match finite differences") {
  Mat x = fixed_mat(4, 3, 12);
  check_unary([](Tape& t, Var a) { return t.transpose(a); }, x);
  check_unary([](Tape& t, Var a) { return t.row_sums(a); }, x);
  check_unary([](Tape& t, Var a) { return t.col_sums(a); }, x);
  check_unary([](Tape& t, Var a) { return t.sum_all(a); }, x);
  check_unary([](Tape& t, Var a) { return t.slice_rows(a, 1, 2); }, x);
  check_unary([](Tape& t, Var a) { return t.place_block(a, 6, 5, 1, 2); }, x);
  check_unary([](Tape& t, Var a) { return t.reshape(a, 3, 4); }, x);
  check_unary([](Tape& t, Var a) { return t.concat_rows({a, t.scale(a, 2.0), a}); }, x);
}

TEST_CASE("reshape reinterprets storage column-major") {
  Mat x(2, 2);
  x << 1, 3, 2, 4;  // column-major storage order: 1,2,3,4
  Tape t;
  Var y = t.reshape(t.constant(x), 4, 1);
  Mat expect(4, 1);
  expect << 1, 2, 3, 4;
  CHECK(t.val(y) == expect);
}

TEST_CASE("straight-through binarization: forward rule on a hand pair") {
  // logits chosen so the symmetrized entries are 0.6 and -0.2: sigmoid(0.6) >
  // 0.5 -> edge present, sigmoid(-0.2) < 0.5 -> absent; diagonal forced clear.
  Mat l(3, 3);
  l << 5.0, 1.0, -0.5, 0.2, 5.0, 0.1, 0.3, -0.5, 5.0;
  Tape t;
  Mat hard = t.val(t.binarize_st(t.constant(l)));
  CHECK(hard(0, 1) == 1.0);  // sym = 0.6
  CHECK(hard(1, 0) == 1.0);
  CHECK(hard(0, 2) == 0.0);  // sym = -0.1
  CHECK(hard(1, 2) == 0.0);  // sym = -0.2
  CHECK(hard(2, 1) == 0.0);
  for (int i = 0; i < 3; ++i) CHECK(hard(i, i) == 0.0);
  CHECK(hard == hard.transpose());
}

TEST_CASE("straight-through binarization: backward matches the relaxed path") {
  Mat l0 = fixed_mat(4, 4, 13);
  Mat w = fixed_mat(4, 4, 14);
  // independent relaxed oracle: sigmoid of the symmetrized logits, zero diag
  auto relaxed = [&](const Mat& lv) {
    Mat sym = 0.5 * (lv + lv.transpose());
    Mat prob = ((1.0 + (-sym.array()).exp()).inverse()).matrix();
    prob.diagonal().setZero();
    return prob.cwiseProduct(w).sum();
  };
  Tape t;
  Var l = t.param(l0);
  Var loss = t.sum_all(t.mul(t.binarize_st(l), t.constant(w)));
  t.backward(loss);
  CHECK(tu::max_rel_err(t.grad(l), tu::fd_grad(l0, relaxed)) < 1e-4);
}

TEST_CASE("cross-entropy value matches an independent log-softmax oracle") {
  Mat s = fixed_mat(5, 3, 15);
  std::vector<int> y = {0, 2, 1, 1, 0};
  Tape t;
  double got = t.val(t.cross_entropy(t.constant(s), y))(0, 0);
  double want = 0.0;
  for (int i = 0; i < 5; ++i) {
    double z = 0.0;
    for (int c = 0; c < 3; ++c) z += std::exp(s(i, c));
    want += std::log(z) - s(i, y[static_cast<std::size_t>(i)]);
  }
  want /= 5.0;
  CHECK(tu::close(got, want, 1e-10));
}

TEST_CASE("cross-entropy of uniform scores equals log of the class count") {
  Mat s = Mat::Constant(4, 7, 0.123);
  Tape t;
  double got = t.val(t.cross_entropy(t.constant(s), {0, 1, 2, 6}))(0, 0);
  CHECK(tu::close(got, std::log(7.0), 1e-12));
}

TEST_CASE("cross-entropy gradient matches finite differences") {
  Mat s0 = fixed_mat(4, 3, 16);
  std::vector<int> y = {2, 0, 1, 2};
  auto value = [&](const Mat& sv) {
    Tape t;
    return t.val(t.cross_entropy(t.constant(sv), y))(0, 0);
  };
  Tape t;
  Var s = t.param(s0);
  t.backward(t.cross_entropy(s, y));
  CHECK(tu::max_rel_err(t.grad(s), tu::fd_grad(s0, value)) < 1e-5);
  CHECK_THROWS_AS((void)t.cross_entropy(s, {0, 1}), DimensionError);
  CHECK_THROWS_AS((void)t.cross_entropy(s, {0, 1, 2, 3}), IndexError);
}

TEST_CASE("detach blocks gradient flow") {
  Mat x0 = fixed_mat(2, 3, 17);
  Tape t;
  Var x = t.param(x0);
  Var loss = t.sum_all(t.mul(t.detach(x), x));
  t.backward(loss);
  // only the non-detached factor contributes: d/dx sum(const .* x) = const
  CHECK(tu::max_rel_err(t.grad(x), x0) < 1e-12);
}

TEST_CASE("gradient of an unreached node is a zero matrix") {
  Tape t;
  Var x = t.param(fixed_mat(2, 2, 18));
  Var y = t.param(fixed_mat(2, 2, 19));
  t.backward(t.sum_all(y));
  CHECK(t.grad(x) == Mat::Zero(2, 2));
  CHECK(t.grad(y) == Mat::Ones(2, 2));
}

TEST_CASE("backward requires a scalar loss") {
  Tape t;
  Var x = t.param(fixed_mat(2, 2, 20));
  CHECK_THROWS_AS(t.backward(x), DimensionError);
}

TEST_CASE("composite two-layer network gradients match finite differences") {
  Mat x = fixed_mat(5, 4, 21);
  Mat w1_0 = fixed_mat(4, 6, 22);
  Mat b1_0 = fixed_mat(1, 6, 23);
  Mat w2_0 = fixed_mat(6, 3, 24);
  std::vector<int> y = {0, 1, 2, 1, 0};
  auto value = [&](const Mat& w1v, const Mat& b1v, const Mat& w2v) {
    Tape t;
    Var h = t.relu(t.add(t.matmul(t.constant(x), t.constant(w1v)), t.constant(b1v)));
    Var s = t.matmul(h, t.constant(w2v));
    return t.val(t.cross_entropy(s, y))(0, 0);
  };
  Tape t;
  Var w1 = t.param(w1_0), b1 = t.param(b1_0), w2 = t.param(w2_0);
  Var h = t.relu(t.add(t.matmul(t.constant(x), w1), b1));
  t.backward(t.cross_entropy(t.matmul(h, w2), y));
  CHECK(tu::max_rel_err(t.grad(w1), tu::fd_grad(w1_0, [&](const Mat& m) {
          return value(m, b1_0, w2_0);
        })) < 1e-4);
  CHECK(tu::max_rel_err(t.grad(b1), tu::fd_grad(b1_0, [&](const Mat& m) {
          return value(w1_0, m, w2_0);
        })) < 1e-4);
  CHECK(tu::max_rel_err(t.grad(w2), tu::fd_grad(w2_0, [&](const Mat& m) {
          return value(w1_0, b1_0, m);
        })) < 1e-4);
}

TEST_CASE("repeated use of one variable accumulates gradient") {
  Mat x0 = fixed_mat(2, 2, 25);
  Tape t;
  Var x = t.param(x0);
  t.backward(t.sum_all(t.add(x, x)));
  CHECK(t.grad(x) == Mat::Constant(2, 2, 2.0));
}
