#include <cmath>
#include <random>

#include "../support/fd_oracle.hpp"
#include "doctest.h"
#include "fpq/error.hpp"
#include "fpq/ops.hpp"
#include "fpq/probes.hpp"

using namespace fpq;
using namespace fpq::testing;

namespace {

Tensor param(std::vector<float> v) {
  const auto n = static_cast<std::int64_t>(v.size());
  Tensor t = Tensor::from({n}, std::move(v));
  t.set_requires_grad(true);
  return t;
}

// 1/2 x^T A x for a dense symmetric A.
struct Quadratic {
  std::int64_t d;
  Tensor a;  // (d, d)
  Tensor x;  // (d)
  Tensor operator()() const {
    Tensor col = reshape(x, {d, 1});
    return scale(sum(mul(col, matmul(a, col))), 0.5f);
  }
  double trace() const {
    double t = 0;
    for (std::int64_t i = 0; i < d; ++i) t += a.data()[i * d + i];
    return t;
  }
};

Quadratic random_quadratic(std::uint64_t seed, std::int64_t d) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> a(static_cast<std::size_t>(d * d));
  for (std::int64_t i = 0; i < d; ++i) {
    for (std::int64_t j = 0; j <= i; ++j) {
      const float v = u(rng) * 0.3f + (i == j ? 2.0f : 0.0f);
      a[i * d + j] = a[j * d + i] = v;
    }
  }
  std::vector<float> x(static_cast<std::size_t>(d));
  for (auto& v : x) v = u(rng);
  return {d, Tensor::from({d, d}, a), param(x)};
}

// Two-layer tanh regression net with 4-6-3 shape: 24 + 6 + 18 + 3 = 51 parameters.
struct TanhNet {
  Tensor w1, b1, w2, b2, x, y;
  Tensor operator()() const {
    Tensor h = tanh(linear(x, w1, b1));
    return mean(square(sub(linear(h, w2, b2), y)));
  }
  std::vector<Tensor> params() const { return {w1, b1, w2, b2}; }
};

TanhNet tanh_net(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto p = [&](Shape s) {
    Tensor t = random_tensor(rng, s, -1.0f, 1.0f);
    t.set_requires_grad(true);
    return t;
  };
  TanhNet n;
  n.w1 = p({6, 4});
  n.b1 = p({6});
  n.w2 = p({3, 6});
  n.b2 = p({3});
  n.x = random_tensor(rng, {8, 4}, -1.0f, 1.0f);
  n.y = random_tensor(rng, {8, 3}, -1.0f, 1.0f);
  return n;
}

}  // namespace

TEST_CASE("identity Hessian gives the dimension on every probe") {
  Tensor x = param({0.3f, -1.0f, 2.0f, 0.5f, 0.1f});
  LossClosure f = [&] { return scale(sum(square(x)), 0.5f); };
  Rng rng(1);
  auto est = hutchinson_trace(f, {x}, 20, rng);
  CHECK(est.mean == doctest::Approx(5.0));
  CHECK(est.std_error == doctest::Approx(0.0));
  CHECK(exact_hessian_trace(f, {x}) == doctest::Approx(5.0).epsilon(1e-3));
}

TEST_CASE("diagonal quadratic converges to its trace") {
  Tensor x = param({1.0f, -2.0f, 0.5f});
  Tensor a = Tensor::from({3}, {1.0f, 2.0f, 3.0f});
  LossClosure f = [&] { return scale(sum(mul(a, square(x))), 0.5f); };
  Rng rng(2);
  CHECK(hutchinson_trace(f, {x}, 1000, rng).mean == doctest::Approx(6.0).epsilon(0.05));
  CHECK(power_iteration_lambda_max(f, {x}, 50, rng) == doctest::Approx(3.0).epsilon(1e-3));
}

TEST_CASE("quartic has the analytic diagonal") {
  Tensor x = param({1.0f, 1.0f, 1.0f});
  LossClosure f = [&] { return sum(square(square(x))); };
  CHECK(exact_hessian_trace(f, {x}) == doctest::Approx(36.0).epsilon(1e-3));
}

TEST_CASE("dense quadratic: Hutchinson agrees with the oracle") {
  auto q = random_quadratic(3, 40);
  LossClosure f = [&] { return q(); };
  const double exact = exact_hessian_trace(f, {q.x});
  CHECK(exact == doctest::Approx(q.trace()).epsilon(1e-3));
  Rng rng(4);
  auto est = hutchinson_trace(f, {q.x}, 1000, rng);
  CHECK(std::fabs(est.mean - exact) <= 0.05 * std::fabs(exact));
  CHECK(std::fabs(est.mean - exact) <= 3.0 * est.std_error);
}

TEST_CASE("smooth net: Hutchinson agrees with the oracle") {
  auto net = tanh_net(5);
  LossClosure f = [&] { return net(); };
  const double exact = exact_hessian_trace(f, net.params());
  Rng rng(6);
  auto est = hutchinson_trace(f, net.params(), 1000, rng);
  CHECK(std::fabs(est.mean - exact) <= 0.05 * std::fabs(exact));
  CHECK(std::fabs(est.mean - exact) <= 3.0 * est.std_error + 1e-3 * std::fabs(exact));
}

TEST_CASE("standard error shrinks as one over root n") {
  auto q = random_quadratic(7, 30);
  LossClosure f = [&] { return q(); };
  Rng r1(8), r2(9);
  const double small = hutchinson_trace(f, {q.x}, 100, r1).std_error;
  const double large = hutchinson_trace(f, {q.x}, 1600, r2).std_error;
  CHECK(small / large > 2.5);
  CHECK(small / large < 6.0);
}

TEST_CASE("probes leave weights untouched and are reproducible") {
  auto net = tanh_net(10);
  const auto before = net.w1.to_vector();
  LossClosure f = [&] { return net(); };
  Rng r1(3), r2(3);
  CHECK(hutchinson_trace(f, net.params(), 10, r1).mean == hutchinson_trace(f, net.params(), 10, r2).mean);
  exact_hessian_trace(f, net.params());
  CHECK(net.w1.to_vector() == before);
}

TEST_CASE("exact oracle refuses large problems") {
  Tensor x = Tensor::zeros({2001});
  x.set_requires_grad(true);
  LossClosure f = [&] { return sum(square(x)); };
  CHECK_THROWS_AS(exact_hessian_trace(f, {x}), Error);
}

TEST_CASE("snapping a minimum costs at most the second-order bound") {
  auto q = random_quadratic(11, 10);
  // Move the minimum to w*: L = 1/2 (x - c)^T A (x - c) with c = current x.
  const auto c = q.x.to_vector();
  Tensor center = Tensor::from({10}, c);
  LossClosure f = [&] {
    Tensor d = reshape(sub(q.x, center), {10, 1});
    return scale(sum(mul(d, matmul(q.a, d))), 0.5f);
  };
  std::vector<float> snapped = c;
  for (auto& v : snapped) v = std::round(v * 4.0f) / 4.0f;
  Rng rng(12);
  auto r = snap_loss_bound(f, {q.x}, {snapped}, 100, rng);
  CHECK(r.loss_increase >= 0.0);
  CHECK(r.loss_increase <= r.bound * (1 + 1e-3) + 1e-6);
  CHECK(q.x.to_vector() == c);
}

TEST_CASE("stability of a linear map matches the analytic variance") {
  Tensor w = Tensor::from({2, 3}, {1.0f, 2.0f, -1.0f, 0.5f, 0.0f, 0.5f});
  Tensor zero_bias = Tensor::zeros({2});
  auto f = [&](const Tensor& x) { return linear(x, w, zero_bias); };
  Tensor x = Tensor::from({4, 3}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
  Rng rng(13);
  const double sigma = 0.1;
  auto r = stability_probe(f, x, sigma, 20000, rng);
  // mean over the two outputs of sigma^2 ||w_row||^2 = 0.01 * (6 + 0.5) / 2
  CHECK(r.variance == doctest::Approx(0.0325).epsilon(0.03));
  Rng rng0(13);
  CHECK(stability_probe(f, x, 0.0, 5, rng0).variance == 0.0);
}

TEST_CASE("model probes on a small convnet") {
  ModelConfig cfg;
  cfg.width = 2;
  cfg.quantized = true;
  cfg.seed = 3;
  LayeredModel student = build(cfg);
  cfg.quantized = false;
  LayeredModel teacher = build(cfg);
  Dataset ds;
  std::mt19937_64 rng(1);
  ds.images = random_tensor(rng, {12, 1, 8, 8}, -1.0f, 2.0f);
  for (int i = 0; i < 12; ++i) ds.labels.push_back(i % 10);
  calibrate_model(student, ds.images);

  auto batches = batch_indices(12, 4, 1, 0);
  ProbeLoss loss{&teacher, {}};
  auto a = grad_norm_trajectory(student, ds, batches, GradNormMode::Feature, 1.0, 5, loss);
  auto b = grad_norm_trajectory(student, ds, batches, GradNormMode::Feature, 1.0, 5, loss);
  CHECK(a == b);
  REQUIRE(a.size() == 3);
  for (double v : a) CHECK(std::isfinite(v));
  auto none = grad_norm_trajectory(student, ds, batches, GradNormMode::None, 1.0, 5, loss);
  CHECK(none != a);

  Batch batch = gather(ds, batches[0]);
  Rng probe_rng(2);
  auto trace = model_hessian_trace(student, batch, 5, probe_rng, loss);
  CHECK(std::isfinite(trace.estimate.mean));
  CHECK(trace.description.find("ce+csd") != std::string::npos);

  Rng srng(3);
  auto st = stability_probe(student, batch.images, 0.05, 4, srng);
  CHECK(st.variance >= 0.0);
  CHECK(st.trials == 4);
}
