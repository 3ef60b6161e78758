#include <cmath>
#include <random>

#include "doctest.h"
#include "msinet/error.hpp"
#include "msinet/numerics/gradcheck.hpp"
#include "msinet/numerics/ops.hpp"
#include "msinet/numerics/optim.hpp"
#include "test_util.hpp"

using namespace msinet;
using msinet::testing::random_tensor;

TEST_CASE("tensor shape invariants") {
  CHECK_THROWS_AS(Tensor<double>({2, 3}, std::vector<double>(5)), ArgumentError);
  CHECK_THROWS_AS(Tensor<double>({2, 0}), ArgumentError);
  Tensor<double> t({2, 3});
  CHECK(t.numel() == 6);
  CHECK_FALSE(t.has_grad());
  CHECK(t.grad().size() == 6);
  CHECK_THROWS_AS(t.reshape({4}), ArgumentError);
}

TEST_CASE("softmax examples") {
  Tape<double> tape;
  auto y = ops::softmax(tape.constant(Tensor<double>({4}, 0.0)), 0);
  for (double v : y.value().values()) CHECK(v == doctest::Approx(0.25));

  y = ops::softmax(tape.constant(Tensor<double>({2}, {std::log(2.0), 0.0})), 0);
  CHECK(y.value()[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(y.value()[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  // Extended-precision reference: softmax([1000, 0]) = [1 - 5.08e-435, 5.08e-435].
  y = ops::softmax(tape.constant(Tensor<double>({2}, {1000.0, 0.0})), 0);
  CHECK(y.value()[0] == 1.0);
  CHECK(y.value()[1] < 1e-300);
  CHECK(std::isfinite(y.value()[1]));

  CHECK_THROWS_AS(ops::softmax(tape.constant(Tensor<double>({2, 2})), 2), ArgumentError);
}

TEST_CASE("softmax rows sum to one for any finite input") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Tape<double> tape;
    auto x = random_tensor({3, 5, 2}, rng, -50.0, 50.0);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      auto y = ops::softmax(tape.constant(x), axis).value();
      const std::size_t outer = axis == 0 ? 1 : (axis == 1 ? 3 : 15);
      const std::size_t extent = x.dim(axis);
      const std::size_t inner = 30 / (outer * extent);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          double s = 0.0;
          for (std::size_t e = 0; e < extent; ++e) {
            const double v = y[(o * extent + e) * inner + i];
            CHECK(v > 0.0);
            s += v;
          }
          CHECK(std::abs(s - 1.0) < 1e-12);
        }
    }
  }
}

TEST_CASE("l2_normalize examples") {
  Tape<double> tape;
  auto y = ops::l2_normalize(tape.constant(Tensor<double>({2}, {3.0, 4.0})), 0);
  CHECK(y.value()[0] == doctest::Approx(0.6));
  CHECK(y.value()[1] == doctest::Approx(0.8));
  auto z = ops::l2_normalize(y, 0);
  CHECK(z.value()[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(z.value()[1] == doctest::Approx(0.8).epsilon(1e-15));
  auto zero = ops::l2_normalize(tape.constant(Tensor<double>({2}, 0.0)), 0, 1e-12);
  double norm = std::hypot(zero.value()[0], zero.value()[1]);
  CHECK(std::isfinite(norm));
  CHECK(norm <= 1.0);
  // Direct formula x / max(||x||, eps) for a tiny vector below eps.
  auto tiny = ops::l2_normalize(tape.constant(Tensor<double>({2}, {3e-14, 4e-14})), 0, 1e-12);
  CHECK(tiny.value()[0] == doctest::Approx(3e-14 / 1e-12));
  CHECK_THROWS_AS(ops::l2_normalize(tape.constant(Tensor<double>({2}, 1.0)), 0, 0.0), ArgumentError);
}

TEST_CASE("backward basics") {
  std::mt19937_64 rng(3);
  Tensor<double> x = random_tensor({2, 3}, rng);
  x.set_requires_grad(true);
  {
    Tape<double> tape;
    tape.backward(ops::sum(tape.param(x)));
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  x.zero_grad();
  {
    Tape<double> tape;
    auto v = tape.param(x);
    tape.backward(ops::dot(v, v));
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == doctest::Approx(2.0 * x[i]));
  }
  x.zero_grad();
  {
    Tape<double> tape;
    CHECK_THROWS_AS(tape.backward(tape.param(x)), ArgumentError);
  }
}

TEST_CASE("gradient of a value used k times is k single-use gradients") {
  std::mt19937_64 rng(5);
  Tensor<double> x = random_tensor({4}, rng);
  x.set_requires_grad(true);
  Tensor<double> single_grad;
  {
    Tape<double> tape;
    tape.backward(ops::sum(ops::sigmoid(tape.param(x))));
    single_grad = Tensor<double>({4}, std::vector<double>(x.grad().begin(), x.grad().end()));
  }
  for (int k = 2; k <= 5; ++k) {
    x.clear_grad();
    Tape<double> tape;
    auto v = tape.param(x);
    auto acc = ops::sum(ops::sigmoid(v));
    for (int i = 1; i < k; ++i) acc = ops::add(acc, ops::sum(ops::sigmoid(v)));
    tape.backward(acc);
    for (std::size_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == doctest::Approx(k * single_grad[i]).epsilon(1e-14));
  }
}

TEST_CASE("grad_check examples") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = random_tensor({6}, rng);
    double err = grad_check([](Tape<double>&, Var<double> v) { return ops::dot(v, v); }, x, 1e-5);
    CHECK(err < 1e-6);
    err = grad_check(
        [](Tape<double>&, Var<double> v) {
          std::size_t pick[] = {2};
          return ops::gather(ops::softmax(v, 0), pick);
        },
        x, 1e-5);
    CHECK(err < 1e-5);
  }
  auto x = random_tensor({3}, rng);
  double err = grad_check(
      [](Tape<double>& t, Var<double>) { return t.constant(Tensor<double>({1}, 4.0)); }, x, 1e-5);
  CHECK(err < 1e-12);
  CHECK_THROWS_AS(grad_check([](Tape<double>&, Var<double> v) { return ops::sum(v); }, x, 1e-2), ArgumentError);
  CHECK_THROWS_AS(grad_check(
                      [](Tape<double>&, Var<double> v) {
                        return ops::sum(ops::scale(v, std::numeric_limits<double>::infinity()));
                      },
                      x, 1e-5),
                  EvaluationError);
}

namespace {

// Composite op chains on random instances; the tape path is compared
// against central differences.
void check_op_gradients(const char* name, const ScalarFn& f, Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) worst = std::max(worst, grad_check(f, random_tensor(shape, rng), 1e-6));
  INFO(name);
  CHECK(worst < 1e-4);
}

}  // namespace

TEST_CASE("finite-difference gradients of every numerics op") {
  std::mt19937_64 wrng(99);
  const Tensor<double> other = random_tensor({3, 4}, wrng);
  check_op_gradients("add/sub/mul", [&](Tape<double>& t, Var<double> v) {
    auto o = t.constant(other);
    return ops::sum(ops::mul(ops::sub(ops::add(v, o), ops::scale(o, 0.5)), ops::add_scalar(v, 0.3)));
  }, {3, 4}, 1);
  check_op_gradients("relu/sigmoid", [](Tape<double>&, Var<double> v) {
    return ops::sum(ops::mul(ops::relu(v), ops::sigmoid(v)));
  }, {3, 4}, 2);
  check_op_gradients("matmul", [&](Tape<double>& t, Var<double> v) {
    auto o = t.constant(other);
    auto a = ops::matmul(v, o, false, true);        // [3,3]
    auto b = ops::matmul(a, v, true, false);        // [3,4]
    return ops::dot(b, ops::sigmoid(v));
  }, {3, 4}, 3);
  check_op_gradients("bmm", [](Tape<double>&, Var<double> v) {
    auto x = ops::reshape(v, {2, 3, 2});
    auto y = ops::bmm(x, x, false, true);           // [2,3,3]
    auto z = ops::bmm(y, x, true, false);           // [2,3,2]
    return ops::sum(ops::sigmoid(z));
  }, {3, 4}, 4);
  check_op_gradients("softmax", [&](Tape<double>& t, Var<double> v) {
    return ops::dot(ops::softmax(v, 1), t.constant(other));
  }, {3, 4}, 5);
  check_op_gradients("l2_normalize", [&](Tape<double>& t, Var<double> v) {
    return ops::dot(ops::l2_normalize(v, 0), t.constant(other));
  }, {3, 4}, 6);
  check_op_gradients("max_along", [](Tape<double>&, Var<double> v) {
    return ops::sum(ops::sigmoid(ops::max_along(v, 1)));
  }, {3, 4}, 7);
  check_op_gradients("scale_by/channel_scale", [](Tape<double>&, Var<double> v) {
    auto gate = ops::sigmoid(ops::reshape(ops::select_rows(v, std::vector<std::size_t>{0, 1}), {2, 4}));
    auto x = ops::reshape(v, {2, 2, 3});
    auto y = ops::channel_scale(ops::reshape(x, {2, 2, 3}), ops::reshape(ops::gather(gate, std::vector<std::size_t>{0, 1, 2, 3}), {2, 2}));
    return ops::sum(ops::scale_by(y, gate, 5));
  }, {3, 4}, 8);
  check_op_gradients("cross_entropy", [](Tape<double>&, Var<double> v) {
    std::vector<std::size_t> labels{1, 3, 0};
    return ops::cross_entropy(ops::scale(v, 3.0), labels);
  }, {3, 4}, 9);
  check_op_gradients("pairwise_distance", [](Tape<double>&, Var<double> v) {
    return ops::sum(ops::mul(ops::pairwise_distance(v), ops::pairwise_distance(v)));
  }, {3, 4}, 10);
  check_op_gradients("pair_cosine", [&](Tape<double>& t, Var<double> v) {
    std::vector<std::pair<std::size_t, std::size_t>> pairs{{0, 1}, {2, 0}, {1, 1}, {2, 2}};
    return ops::sum(ops::pair_cosine(v, ops::add(v, t.constant(other)), pairs));
  }, {3, 4}, 11);
}

TEST_CASE("non-finite values abort with a diagnostic") {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({2}, {1.0, 0.0}));
  CHECK_THROWS_AS(ops::scale(x, std::numeric_limits<double>::infinity()), NonFiniteError);
}

TEST_CASE("sgd examples") {
  Tensor<double> p({1}, 1.0);
  p.grad()[0] = 1.0;
  Tensor<double>* params[] = {&p};
  SgdState<double> s;
  s.options = {0.1, 0.0, 0.0};
  sgd_step<double>(params, s);
  CHECK(p[0] == doctest::Approx(0.9).epsilon(1e-15));

  Tensor<double> q({1}, 2.0);
  q.grad()[0] = 0.0;
  Tensor<double>* qp[] = {&q};
  SgdState<double> s2;
  s2.options = {0.1, 0.0, 0.0};
  sgd_step<double>(qp, s2);
  CHECK(q[0] == 2.0);

  // Hand-rolled recurrence: buf1 = 1, p1 = 0.9; buf2 = 1.9, p2 = 0.71.
  Tensor<double> r({1}, 1.0);
  r.grad()[0] = 1.0;
  Tensor<double>* rp[] = {&r};
  SgdState<double> s3;
  s3.options = {0.1, 0.9, 0.0};
  sgd_step<double>(rp, s3);
  sgd_step<double>(rp, s3);
  CHECK(r[0] == doctest::Approx(0.71).epsilon(1e-14));
  CHECK(s3.steps == 2);

  Tensor<double> wrong({2}, 0.0);
  Tensor<double>* wp[] = {&wrong};
  CHECK_THROWS_AS(sgd_step<double>(wp, s3), ArgumentError);
}

TEST_CASE("adam matches the scalar reference recurrence") {
  const double lr = 0.002, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Tensor<double> p({1}, 0.5);
  Tensor<double>* params[] = {&p};
  AdamState<double> s;
  s.options = {lr, b1, b2, eps, 0.0};
  const double grads[] = {0.3, -1.2, 0.05, 2.0, -0.7};
  double ref = 0.5, m = 0.0, v = 0.0;
  for (int t = 1; t <= 5; ++t) {
    const double g = grads[t - 1];
    p.grad()[0] = g;
    adam_step<double>(params, s);
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
    const double before = ref;
    ref -= lr * mh / (std::sqrt(vh) + eps);
    if (t == 1) CHECK(std::abs(before - ref) == doctest::Approx(lr).epsilon(1e-6));
    CHECK(std::abs(p[0] - ref) < 1e-12);
  }

  Tensor<double> z({3}, 1.5);
  z.grad();
  Tensor<double>* zp[] = {&z};
  AdamState<double> sz;
  for (int i = 0; i < 10; ++i) adam_step<double>(zp, sz);
  for (double val : z.values()) CHECK(val == 1.5);

  AdamState<double> bad;
  bad.options.beta1 = 1.0;
  CHECK_THROWS_AS(adam_step<double>(zp, bad), ArgumentError);
}
