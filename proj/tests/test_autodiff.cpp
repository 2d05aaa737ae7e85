#include <doctest.h>

#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "primitive_cases.hpp"
#include "impression/error.hpp"
#include "impression/gradcheck.hpp"

using namespace impression;
using testing::away_from_zero;
using testing::random_tensor;
using testing::weighted_sum;

TEST_CASE("tensor rejects inconsistent shapes") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.all_finite());
}

TEST_CASE("softmax of zeros is uniform") {
  Tape tape;
  Var s = ops::softmax(tape.constant(Tensor({10}, 0.0)));
  for (double v : s.value().data()) CHECK(v == doctest::Approx(0.1).epsilon(1e-15));
}

TEST_CASE("global average pool of a constant tensor") {
  Tape tape;
  Var g = ops::global_avg_pool(tape.constant(Tensor({4, 4, 3}, 2.0)));
  REQUIRE(g.shape() == Shape{3});
  for (double v : g.value().data()) CHECK(v == 2.0);
}

TEST_CASE("conv2d of ones with a ones kernel") {
  Tape tape;
  Var y = ops::conv2d(tape.constant(Tensor({5, 5, 1}, 1.0)), tape.constant(Tensor({3, 3, 1, 1}, 1.0)), {1, 1});
  REQUIRE(y.shape() == Shape{5, 5, 1});
  const Tensor& v = y.value();
  CHECK(v[2 * 5 + 2] == 9.0);
  CHECK(v[0] == 4.0);
  CHECK(v[4] == 4.0);
  CHECK(v[20] == 4.0);
  CHECK(v[24] == 4.0);
  CHECK(v[2] == 6.0);
}

TEST_CASE("conv2d with a 1x1 identity kernel is the identity") {
  Rng rng(5);
  Tape tape;
  Tensor x = random_tensor({6, 7, 3}, rng);
  Tensor k({1, 1, 3, 3}, 0.0);
  for (std::size_t c = 0; c < 3; ++c) k[c * 3 + c] = 1.0;
  Var y = ops::conv2d(tape.constant(x), tape.constant(k), {1, 0});
  CHECK(y.value() == x);
}

TEST_CASE("conv2d stride and padding shape algebra") {
  Tape tape;
  Var y = ops::conv2d(tape.constant(Tensor({64, 64, 1})), tape.constant(Tensor({3, 3, 1, 16})), {2, 1});
  CHECK(y.shape() == Shape{32, 32, 16});
  CHECK_THROWS_AS(ops::conv2d(tape.constant(Tensor({2, 2, 1})), tape.constant(Tensor({5, 5, 1, 1})), {1, 0}),
                  ShapeError);
}

TEST_CASE("shape errors name the op and both shapes") {
  Tape tape;
  try {
    ops::matmul(tape.constant(Tensor({2, 3})), tape.constant(Tensor({4, 5})));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,5]") != std::string::npos);
  }
}

TEST_CASE("op kinds round-trip by name; unknown names are rejected") {
  for (int k = 0; k <= static_cast<int>(OpKind::loss_kl_divergence); ++k) {
    const auto kind = static_cast<OpKind>(k);
    CHECK(op_kind_from_name(op_name(kind)) == kind);
  }
  CHECK_THROWS_AS(op_kind_from_name("fft"), ValueError);
  Tape tape;
  Var x = tape.constant(Tensor({2}, 1.0));
  CHECK_THROWS_AS(primitive_forward(OpKind::parameter, std::span(&x, 1)), ValueError);
}

TEST_CASE("primitive_forward dispatches like the named ops") {
  Rng rng(2);
  Tape tape;
  Var a = tape.constant(random_tensor({2, 3}, rng));
  Var b = tape.constant(random_tensor({3, 4}, rng));
  Var in[] = {a, b};
  CHECK(primitive_forward(OpKind::matmul, in).value() == ops::matmul(a, b).value());
  OpAttributes attrs;
  attrs.factor = 2.5;
  CHECK(primitive_forward(OpKind::scale, std::span(&a, 1), attrs).value() == ops::scale(a, 2.5).value());
}

TEST_CASE("gradient of an inner product") {
  Parameter w("w", Tensor::vector({1.0, 2.0}));
  Tape tape;
  Var loss = ops::inner_product(tape.param(w), tape.constant(Tensor::vector({3.0, 4.0})));
  tape.backward(loss);
  CHECK(w.grad[0] == 3.0);
  CHECK(w.grad[1] == 4.0);
}

TEST_CASE("softmax-then-pick gradient") {
  Parameter z("z", Tensor::vector({0.0, 0.0}));
  Tape tape;
  Var p = ops::softmax(tape.param(z));
  Var loss = ops::inner_product(p, tape.constant(Tensor::vector({1.0, 0.0})));
  tape.backward(loss);
  CHECK(z.grad[0] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(z.grad[1] == doctest::Approx(-0.25).epsilon(1e-15));
}

TEST_CASE("dead relu passes no gradient") {
  Parameter c("c", Tensor::vector({2.0}));
  Tape tape;
  Var r = ops::relu(tape.constant(Tensor::vector({-5.0})));
  tape.backward(ops::inner_product(r, tape.param(c)));
  CHECK(c.grad[0] == 0.0);
}

TEST_CASE("backward requires a scalar loss") {
  Parameter w("w", Tensor::vector({1.0, 2.0}));
  Tape tape;
  CHECK_THROWS_AS(tape.backward(ops::relu(tape.param(w))), ShapeError);
}

TEST_CASE("unreachable and frozen parameters are untouched") {
  Parameter a("a", Tensor::vector({1.0, 2.0}));
  Parameter b("b", Tensor::vector({3.0, 4.0}));
  Parameter frozen("f", Tensor::vector({1.0, 1.0}));
  frozen.trainable = false;
  b.grad.fill(7.0);
  Tape tape;
  Var pa = tape.param(a);
  tape.param(b);
  tape.backward(ops::inner_product(pa, tape.param(frozen)));
  CHECK(a.grad[0] == 1.0);
  CHECK(b.grad[0] == 7.0);
  CHECK(frozen.grad[0] == 0.0);
}

TEST_CASE("backward visits each node once in reverse order") {
  Parameter w("w", Tensor::vector({0.3, -0.2, 0.9}));
  Tape tape;
  Var x = tape.param(w);
  Var y = ops::relu(x);
  Var s = ops::sigmoid(y);
  Var loss = ops::sum(ops::add(s, x));
  tape.backward(loss);
  const auto& order = tape.last_visit_order();
  for (std::size_t i = 1; i < order.size(); ++i) CHECK(order[i] < order[i - 1]);
  std::vector<std::size_t> sorted = order;
  std::sort(sorted.begin(), sorted.end());
  CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
}

TEST_CASE("backward is additive") {
  Rng rng(11);
  Parameter k("k", random_tensor({3, 3, 2, 2}, rng));
  Parameter x("x", random_tensor({5, 5, 2}, rng));
  Tape tape;
  Var loss = weighted_sum(ops::relu(ops::conv2d(tape.param(x), tape.param(k), {1, 1})), 4);
  tape.backward(loss);
  const Tensor once = k.grad;
  tape.backward(loss);
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(k.grad[i] == 2.0 * once[i]);
}

TEST_CASE("mse examples") {
  Tape tape;
  auto v = [&](std::vector<double> xs) { return tape.constant(Tensor::vector(std::move(xs))); };
  CHECK(ops::mse(v({0.3, 0.4}), v({0.3, 0.4})).value().item() == 0.0);
  CHECK(ops::mse(v({0.0, 1.0}), v({1.0, 0.0})).value().item() == 1.0);
  CHECK(ops::mse(v({0.5}), v({0.75})).value().item() == 0.0625);
  CHECK_THROWS_AS(ops::mse(v({0.5}), v({0.75, 1.0})), ShapeError);
}

TEST_CASE("cross-entropy examples") {
  Tape tape;
  Tensor onehot({1, 10}, 0.0);
  onehot[0] = 1.0;
  CHECK(ops::cross_entropy(tape.constant(Tensor({1, 10}, 0.1)), tape.constant(onehot)).value().item() ==
        doctest::Approx(std::log(10.0)).epsilon(1e-10));
  CHECK(ops::cross_entropy(tape.constant(onehot), tape.constant(onehot)).value().item() <= 1e-11);
  Tensor half({1, 10}, 0.0);
  half[0] = half[1] = 0.5;
  CHECK(ops::cross_entropy(tape.constant(half), tape.constant(onehot)).value().item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-10));

  Tensor two_hot = onehot;
  two_hot[3] = 1.0;
  CHECK_THROWS_AS(ops::cross_entropy(tape.constant(half), tape.constant(two_hot)), ValueError);
  CHECK_THROWS_AS(ops::cross_entropy(tape.constant(half), tape.constant(Tensor({1, 10}, 0.0))), ValueError);
}

TEST_CASE("kl divergence examples") {
  Tape tape;
  Tensor y = Tensor::matrix(1, 2, {1.0, 0.0});
  Tensor p = Tensor::matrix(1, 2, {0.5, 0.5});
  CHECK(ops::kl_divergence(tape.constant(p), tape.constant(p)).value().item() == doctest::Approx(0.0));
  CHECK(ops::kl_divergence(tape.constant(y), tape.constant(p)).value().item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-10));
  CHECK_THROWS_AS(ops::kl_divergence(tape.constant(Tensor::matrix(1, 2, {0.7, 0.7})), tape.constant(p)),
                  ValueError);
}

TEST_CASE("kl divergence is non-negative and zero at equality") {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    Tape tape;
    Var y = ops::softmax(tape.constant(random_tensor({3, 10}, rng, -3, 3)));
    Var p = ops::softmax(tape.constant(random_tensor({3, 10}, rng, -3, 3)));
    CHECK(ops::kl_divergence(y, p).value().item() >= 0.0);
    CHECK(std::abs(ops::kl_divergence(y, y).value().item()) < 1e-10);
  }
}

TEST_CASE("kl and cross-entropy share a gradient with respect to logits") {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 1 + trial % 4;
    Parameter z("z", random_tensor({rows, 10}, rng, -2, 2));
    Tensor onehot({rows, 10}, 0.0);
    for (std::size_t r = 0; r < rows; ++r) onehot[r * 10 + uniform_index(rng, 10)] = 1.0;

    Tape t1;
    t1.backward(ops::kl_divergence(t1.constant(onehot), ops::softmax(t1.param(z))));
    const Tensor g_kl = z.grad;
    z.zero_grad();
    Tape t2;
    Var p = ops::softmax(t2.param(z));
    t2.backward(ops::cross_entropy(p, t2.constant(onehot)));
    for (std::size_t i = 0; i < g_kl.size(); ++i) CHECK(std::abs(g_kl[i] - z.grad[i]) <= 1e-10);

    // and both equal (p - y) / rows
    for (std::size_t i = 0; i < g_kl.size(); ++i)
      CHECK(std::abs(g_kl[i] - (p.value()[i] - onehot[i]) / static_cast<double>(rows)) <= 1e-10);
  }
}

TEST_CASE("finite differences: closed form and constant function") {
  Parameter p("p", Tensor::vector({3.0}));
  Parameter* ps[] = {&p};
  auto square = [&](Tape& t) {
    Var v = t.param(p);
    return ops::inner_product(v, v);
  };
  auto report = finite_difference_check(square, ps, 1e-5);
  CHECK(report.max_relative_error() < 1e-8);
  {
    Tape t;
    t.backward(square(t));
    CHECK(p.grad[0] == doctest::Approx(6.0).epsilon(1e-15));
  }
  auto constant = [&](Tape& t) {
    t.param(p);
    return t.constant(Tensor::scalar(4.0));
  };
  CHECK(finite_difference_check(constant, ps, 1e-5).max_relative_error() == 0.0);
}

TEST_CASE("finite differences: invalid epsilon and non-determinism") {
  Parameter p("p", Tensor::vector({1.0}));
  Parameter* ps[] = {&p};
  auto f = [&](Tape& t) { return ops::sum(t.param(p)); };
  CHECK_THROWS_AS(finite_difference_check(f, ps, 0.0), ValueError);
  CHECK_THROWS_AS(finite_difference_check(f, ps, 0.1), ValueError);
  int calls = 0;
  auto flaky = [&](Tape& t) { return ops::scale(ops::sum(t.param(p)), 1.0 + 1e-3 * ++calls); };
  CHECK_THROWS_AS(finite_difference_check(flaky, ps, 1e-5), ValueError);
}


TEST_CASE("every primitive matches finite differences over random shapes") {
  const auto& kinds = testing::kDifferentiableOps;
  Rng rng(2024);
  std::size_t trials = 0;
  double worst = 0.0;
  for (std::size_t trial = 0; trial < 6 * kinds.size(); ++trial) {
    const OpKind kind = kinds[trial % kinds.size()];
    testing::PrimitiveCase c = testing::make_primitive_case(kind, rng, 1000 + trial);
    std::vector<Parameter*> ptrs;
    for (auto& p : c.params) ptrs.push_back(&p);
    auto graph = [&](Tape& t) { return c.build(t, c.params); };
    const double err = finite_difference_check(graph, ptrs, 1e-5).max_relative_error();
    INFO("op ", op_name(kind), " trial ", trial);
    CHECK(err < 1e-4);
    worst = std::max(worst, err);
    ++trials;
  }
  CHECK(trials >= 100);
  MESSAGE("worst relative error ", worst);
}

TEST_CASE("forward outputs stay finite and softmax rows are normalized") {
  Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    Tape tape;
    Var s = ops::softmax(tape.constant(random_tensor({3, 10}, rng, -10, 10)));
    CHECK(s.value().all_finite());
    for (std::size_t r = 0; r < 3; ++r) {
      double sum = 0.0;
      for (std::size_t j = 0; j < 10; ++j) {
        const double v = s.value()[r * 10 + j];
        CHECK(v > 0.0);
        CHECK(v < 1.0);
        sum += v;
      }
      CHECK(std::abs(sum - 1.0) < 1e-9);
    }
  }
}
