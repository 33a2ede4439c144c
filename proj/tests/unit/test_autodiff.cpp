#include <cmath>
#include <random>

#include "../support/fd_oracle.hpp"
#include "../support/op_cases.hpp"
#include "doctest.h"
#include "fpq/error.hpp"
#include "fpq/ops.hpp"

using namespace fpq;
using namespace fpq::testing;

TEST_CASE("relu clamps negatives and keeps the kink at zero") {
  Tensor y = relu(Tensor::from({3}, {-1.0f, 0.0f, 2.0f}));
  CHECK(y.to_vector() == std::vector<float>{0.0f, 0.0f, 2.0f});

  Tensor x = Tensor::from({3}, {-1.0f, 0.0f, 2.0f}).set_requires_grad(true);
  backward(sum(relu(x)));
  CHECK(x.grad().to_vector() == std::vector<float>{0.0f, 0.0f, 1.0f});
}

TEST_CASE("matmul by the identity returns the operand") {
  std::mt19937_64 rng(1);
  Tensor a = random_tensor(rng, {3, 3});
  Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(matmul(eye, a).to_vector() == a.to_vector());
}

TEST_CASE("conv2d with a scalar 1x1 kernel scales the input") {
  Tensor x = Tensor::from({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor w = Tensor::from({1, 1, 1, 1}, {2.0f});
  Tensor y = conv2d(x, w, {1, 1, 0});
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  for (int i = 0; i < 9; ++i) CHECK(y.data()[i] == doctest::Approx(2.0f * (i + 1)));
}

TEST_CASE("conv2d matches a direct loop with stride and padding") {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor(rng, {2, 3, 6, 5});
  Tensor w = random_tensor(rng, {4, 3, 3, 3});
  ConvGeometry g{3, 2, 1};
  Tensor y = conv2d(x, w, g);
  const int oh = 3, ow = 3;
  REQUIRE(y.shape() == Shape{2, 4, oh, ow});
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 4; ++o)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          double acc = 0.0;
          for (int c = 0; c < 3; ++c)
            for (int ki = 0; ki < 3; ++ki)
              for (int kj = 0; kj < 3; ++kj) {
                int yy = i * 2 - 1 + ki, xx = j * 2 - 1 + kj;
                if (yy < 0 || yy >= 6 || xx < 0 || xx >= 5) continue;
                acc += x.data()[((n * 3 + c) * 6 + yy) * 5 + xx] * w.data()[((o * 3 + c) * 3 + ki) * 3 + kj];
              }
          CHECK(y.data()[((n * 4 + o) * oh + i) * ow + j] == doctest::Approx(acc).epsilon(1e-5));
        }
}

TEST_CASE("backward of sum of squares") {
  Tensor x = Tensor::from({2}, {1.0f, 2.0f}).set_requires_grad(true);
  backward(sum(square(x)));
  CHECK(x.grad().to_vector() == std::vector<float>{2.0f, 4.0f});
}

TEST_CASE("softmax cross-entropy gradient on equal logits") {
  Tensor logits = Tensor::from({1, 2}, {0.0f, 0.0f}).set_requires_grad(true);
  Tensor loss = softmax_cross_entropy(logits, {0});
  CHECK(loss.item() == doctest::Approx(std::log(2.0)));
  backward(loss);
  CHECK(logits.grad().data()[0] == doctest::Approx(-0.5f));
  CHECK(logits.grad().data()[1] == doctest::Approx(0.5f));
}

TEST_CASE("every operator matches central finite differences") {
  std::mt19937_64 rng(2024);
  for (const auto& c : differentiable_op_cases()) {
    for (int trial = 0; trial < 5; ++trial) {
      auto [f, inputs] = c.make(rng);
      double err = gradient_check(f, inputs);
      INFO(c.name << " trial " << trial << " relative error " << err);
      CHECK(err <= 1e-3);
    }
  }
}

TEST_CASE("gradients accumulate additively and backward is linear") {
  std::mt19937_64 rng(3);
  Tensor x0 = random_tensor(rng, {4});
  auto l1 = [](const Tensor& x) { return sum(tanh(x)); };
  auto l2 = [](const Tensor& x) { return sum(square(scale(x, 3.0f))); };

  Tensor a = x0.detach().set_requires_grad(true);
  backward(add(l1(a), l2(a)));

  Tensor b = x0.detach().set_requires_grad(true);
  backward(l1(b));
  backward(l2(b));  // second call accumulates into .grad

  for (int i = 0; i < 4; ++i) CHECK(a.grad().data()[i] == doctest::Approx(b.grad().data()[i]).epsilon(1e-6));
}

TEST_CASE("a tensor used twice receives both contributions") {
  Tensor x = Tensor::from({1}, {3.0f}).set_requires_grad(true);
  backward(mul(x, x));
  CHECK(x.grad().item() == doctest::Approx(6.0f));
}

TEST_CASE("repeated forwards are bit-identical") {
  std::mt19937_64 rng(9);
  Tensor x = random_tensor(rng, {2, 3, 8, 8});
  Tensor w = random_tensor(rng, {4, 3, 3, 3});
  Tensor y1 = softmax(reshape(conv2d(x, w, {3, 1, 1}), {2, 256}));
  Tensor y2 = softmax(reshape(conv2d(x, w, {3, 1, 1}), {2, 256}));
  CHECK(y1.to_vector() == y2.to_vector());
}

TEST_CASE("double backward gives Hessian-vector products") {
  // f(x) = sum(tanh(W x)^2) for a fixed W; H v from the tape is compared with
  // central differences of the gradient along v.
  std::mt19937_64 rng(11);
  Tensor w = random_tensor(rng, {3, 4});
  Tensor x0 = random_tensor(rng, {4, 1});
  Tensor v = random_tensor(rng, {4, 1});
  auto f = [&](const Tensor& x) { return sum(square(tanh(matmul(w, x)))); };

  Tensor x = x0.detach().set_requires_grad(true);
  Tensor g = grad(f(x), {x}, /*create_graph=*/true)[0];
  Tensor hv = grad(sum(mul(g, v)), {x})[0];

  const double h = 1e-3;
  auto grad_at = [&](double t) {
    std::vector<float> shifted(4);
    for (int i = 0; i < 4; ++i) shifted[i] = static_cast<float>(x0.data()[i] + t * v.data()[i]);
    Tensor xs = Tensor::from({4, 1}, shifted).set_requires_grad(true);
    return grad(f(xs), {xs})[0].to_vector();
  };
  auto up = grad_at(h), down = grad_at(-h);
  std::vector<std::vector<double>> fd(1), ad(1);
  for (int i = 0; i < 4; ++i) {
    fd[0].push_back((up[i] - down[i]) / (2 * h));
    ad[0].push_back(hv.data()[i]);
  }
  CHECK(relative_error(ad, fd) <= 1e-3);
}

TEST_CASE("shape errors name the operator and the offending dims") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("2x3") != std::string::npos);
    CHECK(msg.find("4x2") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, Tensor::zeros({3, 2})), ShapeError);
  CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), {3, 1, 0}),
                  ShapeError);
}

TEST_CASE("non-finite values are rejected") {
  CHECK_THROWS_AS(Tensor::from({2}, {1.0f, std::nanf("")}), NonFiniteError);
  CHECK_THROWS_AS(reciprocal(Tensor::zeros({1})), NonFiniteError);
}

TEST_CASE("backward requires a scalar loss with a tape") {
  Tensor x = Tensor::from({2}, {1.0f, 2.0f}).set_requires_grad(true);
  CHECK_THROWS_AS(backward(square(x)), Error);
  CHECK_THROWS_AS(backward(Tensor::scalar(1.0f)), Error);
}

TEST_CASE("no-grad mode records nothing") {
  Tensor x = Tensor::from({2}, {1.0f, 2.0f}).set_requires_grad(true);
  NoGradGuard guard;
  Tensor y = square(x);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.is_leaf());
}

TEST_CASE("forward_op dispatches by name") {
  Tensor x = Tensor::from({1, 3}, {-1.0f, 0.0f, 2.0f});
  CHECK(forward_op("relu", {x}).to_vector() == std::vector<float>{0.0f, 0.0f, 2.0f});
  CHECK(forward_op("variance", {Tensor::from({3}, {1, 2, 3})}).item() == doctest::Approx(2.0f / 3.0f));
  CHECK_THROWS_AS(forward_op("nope", {x}), Error);
}
