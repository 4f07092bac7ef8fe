#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "iekd/ops.hpp"
#include "iekd/tape.hpp"
#include "iekd/tensor.hpp"
#include "oracles.hpp"

using namespace iekd;
namespace ot = iekd::testing;

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor({2, 0}, {}), Error);
  CHECK_THROWS_AS(Tensor(Shape{}, {}), Error);
  CHECK_THROWS_AS(Tensor({3}, {1.0, 2.0}), Error);
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
}

TEST_CASE("tensor serialization round trip") {
  Rng rng(11);
  Tensor t = Tensor::randn({2, 3, 4}, rng);
  std::stringstream ss;
  save_tensor(ss, t);
  Tensor u = load_tensor(ss);
  CHECK(u.shape == t.shape);
  CHECK(u.data == t.data);

  std::stringstream bad("XXXXjunkjunkjunk");
  try {
    load_tensor(bad);
    FAIL("expected MalformedFile");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::MalformedFile);
  }
}

TEST_CASE("elementwise examples") {
  Tape t;
  NodeId a = t.constant(Tensor({3}, {-1, 2, 0}));
  CHECK(t.val(ops::abs(t, a)).data == std::vector<double>{1, 2, 0});

  NodeId b = t.constant(Tensor({2}, {-10, 5}));
  CHECK(t.val(ops::leaky_relu(t, b, 0.1)).data == std::vector<double>{-1, 5});

  // gradient of sum(x*x) at [1,2,3] is 2x
  Tensor x({3}, {1, 2, 3});
  NodeId xi = t.param(x);
  NodeId loss = ops::reduce_all(t, ops::ReduceKind::Sum, ops::mul(t, xi, xi));
  t.backward(loss);
  CHECK(x.grad == std::vector<double>{2, 4, 6});
}

TEST_CASE("binary shape mismatch and scalar broadcast") {
  Tape t;
  NodeId a = t.constant(Tensor({2}, {1, 2}));
  NodeId b = t.constant(Tensor({3}, {1, 2, 3}));
  try {
    ops::add(t, a, b);
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ShapeMismatch);
  }
  NodeId s = t.constant(Tensor::scalar(10.0));
  CHECK(t.val(ops::mul(t, a, s)).data == std::vector<double>{10, 20});
  CHECK(t.val(ops::add(t, s, b)).data == std::vector<double>{11, 12, 13});
}

TEST_CASE("matmul examples") {
  Tape t;
  NodeId eye = t.constant(Tensor({2, 2}, {1, 0, 0, 1}));
  NodeId m = t.constant(Tensor({2, 2}, {1, 2, 3, 4}));
  CHECK(t.val(ops::matmul(t, eye, m)).data == std::vector<double>{1, 2, 3, 4});

  NodeId r = t.constant(Tensor({1, 2}, {1, 2}));
  NodeId c = t.constant(Tensor({2, 1}, {3, 4}));
  CHECK(t.val(ops::matmul(t, r, c)).data == std::vector<double>{11});

  try {
    ops::matmul(t, r, r);
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ShapeMismatch);
  }
}

TEST_CASE("matmul gradient vs central differences") {
  Rng rng(3);
  Tensor a = Tensor::randn({3, 4}, rng);
  Tensor b = Tensor::randn({4, 2}, rng);
  Tensor w = Tensor::randn({3, 2}, rng);  // weights for a scalar projection

  auto eval = [&]() {
    Tape t;
    NodeId prod = ops::matmul(t, t.param(a), t.param(b));
    NodeId weighted = ops::mul(t, prod, t.constant(w));
    return t.val(ops::reduce_all(t, ops::ReduceKind::Sum, weighted)).scalar_value();
  };

  Tape t;
  NodeId ai = t.param(a);
  NodeId bi = t.param(b);
  NodeId loss = ops::reduce_all(t, ops::ReduceKind::Sum, ops::mul(t, ops::matmul(t, ai, bi), t.constant(w)));
  a.zero_grad();
  b.zero_grad();
  t.backward(loss);

  CHECK(ot::max_rel_error(a.grad, ot::finite_difference(a, eval)) < 1e-6);
  CHECK(ot::max_rel_error(b.grad, ot::finite_difference(b, eval)) < 1e-6);
}

TEST_CASE("conv2d value oracle") {
  // all-ones 3x3 input and kernel, pad 1: center 9, edges 6, corners 4
  Tape t;
  NodeId x = t.constant(Tensor::full({1, 1, 3, 3}, 1.0));
  NodeId w = t.constant(Tensor::full({1, 1, 3, 3}, 1.0));
  const auto& y = t.val(ops::conv2d(t, x, w));
  CHECK(y.data == std::vector<double>{4, 6, 4, 6, 9, 6, 4, 6, 4});

  NodeId wz = t.constant(Tensor::zeros({2, 1, 3, 3}));
  for (double v : t.val(ops::conv2d(t, x, wz)).data) CHECK(v == 0.0);

  // random case against the naive sliding-window oracle
  Rng rng(5);
  Tensor xr = Tensor::randn({2, 3, 5, 4}, rng);
  Tensor wr = Tensor::randn({4, 3, 3, 3}, rng);
  Tape t2;
  const auto& fast = t2.val(ops::conv2d(t2, t2.constant(xr), t2.constant(wr)));
  Tensor slow = ot::naive_conv2d(xr, wr);
  CHECK(ot::max_rel_error(fast.data, slow.data) < 1e-12);
}

TEST_CASE("conv2d gradient vs central differences") {
  Rng rng(7);
  Tensor x = Tensor::randn({1, 2, 4, 4}, rng);
  Tensor w = Tensor::randn({3, 2, 3, 3}, rng);
  Tensor proj = Tensor::randn({1, 3, 4, 4}, rng);

  auto eval = [&]() {
    Tape t;
    NodeId y = ops::conv2d(t, t.param(x), t.param(w));
    return t.val(ops::reduce_all(t, ops::ReduceKind::Sum, ops::mul(t, y, t.constant(proj)))).scalar_value();
  };

  Tape t;
  NodeId xi = t.param(x);
  NodeId wi = t.param(w);
  NodeId loss = ops::reduce_all(t, ops::ReduceKind::Sum, ops::mul(t, ops::conv2d(t, xi, wi), t.constant(proj)));
  x.zero_grad();
  w.zero_grad();
  t.backward(loss);

  CHECK(ot::max_rel_error(x.grad, ot::finite_difference(x, eval)) < 1e-5);
  CHECK(ot::max_rel_error(w.grad, ot::finite_difference(w, eval)) < 1e-5);
}

TEST_CASE("conv2d_transpose adjoint identity and gradients") {
  Rng rng(9);
  Tensor x = Tensor::randn({2, 3, 4, 4}, rng);
  Tensor k = Tensor::randn({5, 3, 3, 3}, rng);
  Tensor y = Tensor::randn({2, 5, 4, 4}, rng);

  Tape t;
  const auto& cx = t.val(ops::conv2d(t, t.constant(x), t.constant(k)));
  const auto& cty = t.val(ops::conv2d_transpose(t, t.constant(y), t.constant(k)));
  const double lhs = ot::dot(cx.data, y.data);
  const double rhs = ot::dot(x.data, cty.data);
  CHECK(std::abs(lhs - rhs) < 1e-10 * std::max(1.0, std::abs(lhs)));

  NodeId zero = t.constant(Tensor::zeros({1, 5, 4, 4}));
  for (double v : t.val(ops::conv2d_transpose(t, zero, t.constant(k))).data) CHECK(v == 0.0);

  Tensor u = Tensor::randn({1, 2, 3, 3}, rng);
  Tensor kt = Tensor::randn({2, 3, 3, 3}, rng);  // [Ci,Co,K,K]
  Tensor proj = Tensor::randn({1, 3, 3, 3}, rng);
  auto eval = [&]() {
    Tape tp;
    NodeId v = ops::conv2d_transpose(tp, tp.param(u), tp.param(kt));
    return tp.val(ops::reduce_all(tp, ops::ReduceKind::Sum, ops::mul(tp, v, tp.constant(proj)))).scalar_value();
  };
  Tape tg;
  NodeId ui = tg.param(u);
  NodeId ki = tg.param(kt);
  NodeId loss = ops::reduce_all(tg, ops::ReduceKind::Sum,
                                ops::mul(tg, ops::conv2d_transpose(tg, ui, ki), tg.constant(proj)));
  u.zero_grad();
  kt.zero_grad();
  tg.backward(loss);
  CHECK(ot::max_rel_error(u.grad, ot::finite_difference(u, eval)) < 1e-5);
  CHECK(ot::max_rel_error(kt.grad, ot::finite_difference(kt, eval)) < 1e-5);
}

TEST_CASE("batch_norm normalizes per channel") {
  Rng rng(13);
  // large amplitude so the 1e-5 epsilon guard is negligible at 1e-6 tolerance
  Tensor x = Tensor::randn({4, 3, 2, 2}, rng, 50.0);
  Tensor gamma = Tensor::full({3}, 1.0);
  Tensor beta = Tensor::zeros({3});
  ops::BatchNormState st{Tensor::zeros({3}), Tensor::full({3}, 1.0)};

  Tape t;
  const auto& y = t.val(ops::batch_norm(t, t.constant(x), t.constant(gamma), t.constant(beta), st, true));
  for (std::int64_t ch = 0; ch < 3; ++ch) {
    double mean = 0.0, var = 0.0;
    for (std::int64_t n = 0; n < 4; ++n)
      for (std::int64_t i = 0; i < 4; ++i) mean += y.data[static_cast<std::size_t>(((n * 3 + ch) * 4) + i)];
    mean /= 16.0;
    for (std::int64_t n = 0; n < 4; ++n)
      for (std::int64_t i = 0; i < 4; ++i) {
        double d = y.data[static_cast<std::size_t>(((n * 3 + ch) * 4) + i)] - mean;
        var += d * d;
      }
    var /= 16.0;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }
}

TEST_CASE("batch_norm constant input yields beta") {
  Tensor xc = Tensor::full({2, 2, 2, 2}, 3.0);
  Tensor gamma = Tensor::full({2}, 1.7);
  Tensor beta({2}, {0.25, -0.5});
  ops::BatchNormState st{Tensor::zeros({2}), Tensor::full({2}, 1.0)};
  Tape t;
  const auto& y = t.val(ops::batch_norm(t, t.constant(xc), t.constant(gamma), t.constant(beta), st, true));
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t ch = 0; ch < 2; ++ch)
      for (std::int64_t i = 0; i < 4; ++i)
        CHECK(y.data[static_cast<std::size_t>((n * 2 + ch) * 4 + i)] ==
              doctest::Approx(beta.data[static_cast<std::size_t>(ch)]).epsilon(1e-12));
}

TEST_CASE("batch_norm degenerate batch") {
  Tensor x = Tensor::full({1, 2, 1, 1}, 1.0);
  Tensor gamma = Tensor::full({2}, 1.0);
  Tensor beta = Tensor::zeros({2});
  ops::BatchNormState st{Tensor::zeros({2}), Tensor::full({2}, 1.0)};
  Tape t;
  try {
    ops::batch_norm(t, t.constant(x), t.constant(gamma), t.constant(beta), st, true);
    FAIL("expected DegenerateBatch");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::DegenerateBatch);
  }
}

TEST_CASE("batch_norm gradient vs central differences") {
  Rng rng(17);
  Tensor x = Tensor::randn({3, 2, 2, 2}, rng);
  Tensor gamma = Tensor::randn({2}, rng, 0.2);
  for (auto& v : gamma.data) v += 1.0;
  Tensor beta = Tensor::randn({2}, rng, 0.2);
  Tensor proj = Tensor::randn({3, 2, 2, 2}, rng);

  auto make_state = [] { return ops::BatchNormState{Tensor::zeros({2}), Tensor::full({2}, 1.0)}; };
  auto eval = [&]() {
    Tape t;
    ops::BatchNormState st = make_state();
    NodeId y = ops::batch_norm(t, t.param(x), t.param(gamma), t.param(beta), st, true);
    return t.val(ops::reduce_all(t, ops::ReduceKind::Sum, ops::mul(t, y, t.constant(proj)))).scalar_value();
  };

  Tape t;
  ops::BatchNormState st = make_state();
  NodeId loss = ops::reduce_all(
      t, ops::ReduceKind::Sum,
      ops::mul(t, ops::batch_norm(t, t.param(x), t.param(gamma), t.param(beta), st, true), t.constant(proj)));
  x.zero_grad();
  gamma.zero_grad();
  beta.zero_grad();
  t.backward(loss);

  CHECK(ot::max_rel_error(x.grad, ot::finite_difference(x, eval)) < 1e-4);
  CHECK(ot::max_rel_error(gamma.grad, ot::finite_difference(gamma, eval)) < 1e-4);
  CHECK(ot::max_rel_error(beta.grad, ot::finite_difference(beta, eval)) < 1e-4);
}

TEST_CASE("reduction examples") {
  Tape t;
  CHECK(t.val(ops::reduce_all(t, ops::ReduceKind::L2Norm, t.constant(Tensor({2}, {3, 4})))).scalar_value() == 5.0);
  CHECK(t.val(ops::reduce_all(t, ops::ReduceKind::L1Norm, t.constant(Tensor({3}, {-1, 2, -3})))).scalar_value() == 6.0);
  CHECK(t.val(ops::reduce_all(t, ops::ReduceKind::Mean, t.constant(Tensor({4}, {1, 2, 3, 4})))).scalar_value() == 2.5);

  // empty-axis reduction is the identity
  NodeId x = t.constant(Tensor({2, 2}, {1, -2, 3, -4}));
  CHECK(t.val(ops::reduce(t, ops::ReduceKind::L2Norm, x, {})).data == std::vector<double>{1, -2, 3, -4});

  // row-wise reduction of [N,D]
  NodeId rows = t.constant(Tensor({2, 2}, {3, 4, -6, 8}));
  const auto& rl2 = t.val(ops::reduce(t, ops::ReduceKind::L2Norm, rows, {1}));
  CHECK(rl2.shape == Shape{2});
  CHECK(rl2.data == std::vector<double>{5, 10});
}

TEST_CASE("reduction gradients vs central differences") {
  Rng rng(23);
  for (auto kind : {ops::ReduceKind::Sum, ops::ReduceKind::Mean, ops::ReduceKind::L1Norm, ops::ReduceKind::L2Norm}) {
    Tensor x = Tensor::randn({3, 4}, rng);
    for (auto& v : x.data)
      if (std::abs(v) < 0.05) v += 0.2;  // stay away from |x| kinks
    Tensor proj = Tensor::randn({3}, rng);

    auto eval = [&]() {
      Tape t;
      NodeId r = ops::reduce(t, kind, t.param(x), {1});
      return t.val(ops::reduce_all(t, ops::ReduceKind::Sum, ops::mul(t, r, t.constant(proj)))).scalar_value();
    };
    Tape t;
    NodeId loss = ops::reduce_all(t, ops::ReduceKind::Sum,
                                  ops::mul(t, ops::reduce(t, kind, t.param(x), {1}), t.constant(proj)));
    x.zero_grad();
    t.backward(loss);
    CHECK(ot::max_rel_error(x.grad, ot::finite_difference(x, eval)) < 1e-5);
  }
}

TEST_CASE("softmax cross entropy") {
  Tape t;
  std::vector<int> labels{2};
  NodeId uniform = t.constant(Tensor({1, 4}, {0.7, 0.7, 0.7, 0.7}));
  CHECK(t.val(ops::softmax_cross_entropy(t, uniform, labels)).scalar_value() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));

  std::vector<int> zero{0};
  NodeId extreme = t.constant(Tensor({1, 2}, {1000, 0}));
  const double stable = t.val(ops::softmax_cross_entropy(t, extreme, zero)).scalar_value();
  CHECK(std::isfinite(stable));
  CHECK(stable < 1e-300);

  std::vector<int> bad{7};
  try {
    ops::softmax_cross_entropy(t, uniform, bad);
    FAIL("expected LabelOutOfRange");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::LabelOutOfRange);
  }
}

TEST_CASE("softmax cross entropy gradient equals softmax minus one-hot") {
  Rng rng(29);
  Tensor logits = Tensor::randn({4, 3}, rng);
  std::vector<int> labels{0, 2, 1, 2};

  Tape t;
  NodeId li = t.param(logits);
  NodeId loss = ops::softmax_cross_entropy(t, li, labels);
  logits.zero_grad();
  t.backward(loss);

  // closed form
  std::vector<double> expect(logits.data.size());
  for (std::int64_t i = 0; i < 4; ++i) {
    double mx = -1e300, sum = 0.0;
    for (std::int64_t j = 0; j < 3; ++j) mx = std::max(mx, logits.data[static_cast<std::size_t>(i * 3 + j)]);
    for (std::int64_t j = 0; j < 3; ++j) sum += std::exp(logits.data[static_cast<std::size_t>(i * 3 + j)] - mx);
    for (std::int64_t j = 0; j < 3; ++j) {
      double p = std::exp(logits.data[static_cast<std::size_t>(i * 3 + j)] - mx) / sum;
      if (j == labels[static_cast<std::size_t>(i)]) p -= 1.0;
      expect[static_cast<std::size_t>(i * 3 + j)] = p / 4.0;
    }
  }
  CHECK(ot::max_rel_error(logits.grad, expect) < 1e-10);

  auto eval = [&]() {
    Tape tp;
    return tp.val(ops::softmax_cross_entropy(tp, tp.param(logits), labels)).scalar_value();
  };
  CHECK(ot::max_rel_error(logits.grad, ot::finite_difference(logits, eval)) < 1e-6);
}

TEST_CASE("backward contracts") {
  // constant loss: all grads zero
  Tensor p = Tensor::full({3}, 2.0);
  Tape t;
  t.param(p);
  NodeId c = t.constant(Tensor::scalar(42.0));
  p.zero_grad();
  t.backward(c);
  CHECK(p.grad == std::vector<double>{0, 0, 0});

  // two backward calls double the grads
  Tape t2;
  NodeId pi = t2.param(p);
  NodeId loss = ops::reduce_all(t2, ops::ReduceKind::Sum, ops::mul(t2, pi, pi));
  p.zero_grad();
  t2.backward(loss);
  const auto once = p.grad;
  t2.backward(loss);
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(p.grad[i] == 2.0 * once[i]);

  // non-scalar loss rejected
  try {
    t2.backward(pi);
    FAIL("expected NonScalarLoss");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::NonScalarLoss);
  }
}

TEST_CASE("row_l2_normalize values and gradient") {
  Tape t;
  NodeId x = t.constant(Tensor({1, 2}, {3, 4}));
  CHECK(t.val(ops::row_l2_normalize(t, x)).data == std::vector<double>{0.6, 0.8});

  NodeId z = t.constant(Tensor({1, 2}, {0, 0}));
  try {
    ops::row_l2_normalize(t, z);
    FAIL("expected ZeroNormFactor");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ZeroNormFactor);
  }
  CHECK(t.val(ops::row_l2_normalize(t, z, 1e-12)).data == std::vector<double>{0, 0});

  Rng rng(31);
  Tensor xr = Tensor::randn({3, 5}, rng);
  Tensor proj = Tensor::randn({3, 5}, rng);
  auto eval = [&]() {
    Tape tp;
    NodeId y = ops::row_l2_normalize(tp, tp.param(xr));
    return tp.val(ops::reduce_all(tp, ops::ReduceKind::Sum, ops::mul(tp, y, tp.constant(proj)))).scalar_value();
  };
  Tape tg;
  NodeId loss = ops::reduce_all(tg, ops::ReduceKind::Sum,
                                ops::mul(tg, ops::row_l2_normalize(tg, tg.param(xr)), tg.constant(proj)));
  xr.zero_grad();
  tg.backward(loss);
  CHECK(ot::max_rel_error(xr.grad, ot::finite_difference(xr, eval)) < 1e-5);
}

TEST_CASE("gather_channels round trip and gradient") {
  Rng rng(37);
  Tensor x = Tensor::randn({2, 4, 2, 2}, rng);
  std::vector<std::int64_t> pick{2, 0};

  Tape t;
  NodeId xi = t.constant(x);
  const auto& y = t.val(ops::gather_channels(t, xi, pick));
  CHECK(y.shape == Shape{2, 2, 2, 2});
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t j = 0; j < 2; ++j)
      for (std::int64_t i = 0; i < 4; ++i)
        CHECK(y.data[static_cast<std::size_t>((n * 2 + j) * 4 + i)] ==
              x.data[static_cast<std::size_t>((n * 4 + pick[static_cast<std::size_t>(j)]) * 4 + i)]);

  std::vector<std::int64_t> bad{5};
  try {
    ops::gather_channels(t, xi, bad);
    FAIL("expected IndexOutOfRange");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::IndexOutOfRange);
  }

  Tensor proj = Tensor::randn({2, 2, 2, 2}, rng);
  auto eval = [&]() {
    Tape tp;
    NodeId g = ops::gather_channels(tp, tp.param(x), pick);
    return tp.val(ops::reduce_all(tp, ops::ReduceKind::Sum, ops::mul(tp, g, tp.constant(proj)))).scalar_value();
  };
  Tape tg;
  NodeId loss = ops::reduce_all(
      tg, ops::ReduceKind::Sum, ops::mul(tg, ops::gather_channels(tg, tg.param(x), pick), tg.constant(proj)));
  x.zero_grad();
  tg.backward(loss);
  CHECK(ot::max_rel_error(x.grad, ot::finite_difference(x, eval)) < 1e-6);
}

TEST_CASE("misc op gradients vs central differences") {
  Rng rng(41);

  SUBCASE("div and sqrt") {
    Tensor a = Tensor::randn({4}, rng);
    Tensor b = Tensor::randn({4}, rng);
    for (auto& v : b.data) v = 1.0 + std::abs(v);
    auto eval = [&]() {
      Tape tp;
      NodeId q = ops::div(tp, tp.param(a), tp.param(b));
      NodeId s = ops::sqrt(tp, ops::mul(tp, q, q));
      return tp.val(ops::reduce_all(tp, ops::ReduceKind::Sum, s)).scalar_value();
    };
    Tape t;
    NodeId q = ops::div(t, t.param(a), t.param(b));
    NodeId loss = ops::reduce_all(t, ops::ReduceKind::Sum, ops::sqrt(t, ops::mul(t, q, q)));
    a.zero_grad();
    b.zero_grad();
    t.backward(loss);
    CHECK(ot::max_rel_error(a.grad, ot::finite_difference(a, eval)) < 1e-5);
    CHECK(ot::max_rel_error(b.grad, ot::finite_difference(b, eval)) < 1e-5);
  }

  SUBCASE("transpose, center_columns, add_row_bias") {
    Tensor x = Tensor::randn({3, 4}, rng);
    Tensor bias = Tensor::randn({3}, rng);
    Tensor proj = Tensor::randn({4, 3}, rng);
    auto eval = [&]() {
      Tape tp;
      NodeId y = ops::add_row_bias(tp, ops::center_columns(tp, ops::transpose2d(tp, tp.param(x))), tp.param(bias));
      return tp.val(ops::reduce_all(tp, ops::ReduceKind::Sum, ops::mul(tp, y, tp.constant(proj)))).scalar_value();
    };
    Tape t;
    NodeId y = ops::add_row_bias(t, ops::center_columns(t, ops::transpose2d(t, t.param(x))), t.param(bias));
    NodeId loss = ops::reduce_all(t, ops::ReduceKind::Sum, ops::mul(t, y, t.constant(proj)));
    x.zero_grad();
    bias.zero_grad();
    t.backward(loss);
    CHECK(ot::max_rel_error(x.grad, ot::finite_difference(x, eval)) < 1e-6);
    CHECK(ot::max_rel_error(bias.grad, ot::finite_difference(bias, eval)) < 1e-6);
  }

  SUBCASE("global_avg_pool and reshape") {
    Tensor x = Tensor::randn({2, 3, 2, 2}, rng);
    Tensor proj = Tensor::randn({2, 3}, rng);
    auto eval = [&]() {
      Tape tp;
      NodeId y = ops::global_avg_pool(tp, tp.param(x));
      NodeId flat = ops::reshape(tp, y, {6});
      return tp.val(ops::reduce_all(tp, ops::ReduceKind::Sum,
                                    ops::mul(tp, flat, tp.constant(proj.reshaped({6}))))).scalar_value();
    };
    Tape t;
    NodeId loss = ops::reduce_all(
        t, ops::ReduceKind::Sum,
        ops::mul(t, ops::reshape(t, ops::global_avg_pool(t, t.param(x)), {6}), t.constant(proj.reshaped({6}))));
    x.zero_grad();
    t.backward(loss);
    CHECK(ot::max_rel_error(x.grad, ot::finite_difference(x, eval)) < 1e-6);
  }
}

TEST_CASE("tape replay determinism") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = Tensor::randn({2, 3, 4, 4}, rng);
    Tensor w = Tensor::randn({3, 3, 3, 3}, rng);
    Tape t;
    NodeId y = ops::conv2d(t, t.param(x), t.param(w));
    NodeId loss = ops::reduce_all(t, ops::ReduceKind::Mean, ops::mul(t, y, y));
    x.zero_grad();
    w.zero_grad();
    t.backward(loss);
    Fnv64 h;
    h.update(t.val(loss).data);
    h.update(x.grad);
    h.update(w.grad);
    return h.digest();
  };
  CHECK(run(123) == run(123));
  CHECK(run(123) != run(124));
}
