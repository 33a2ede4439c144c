#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include "../support/fd_oracle.hpp"
#include "doctest.h"
#include "fpq/checkpoint.hpp"
#include "fpq/error.hpp"
#include "fpq/model.hpp"

using namespace fpq;
using namespace fpq::testing;

namespace {

Tensor images(std::uint64_t seed, std::int64_t n, std::int64_t c, std::int64_t hw) {
  std::mt19937_64 rng(seed);
  return random_tensor(rng, {n, c, hw, hw}, -1.0f, 2.0f);
}

LayeredModel toy(bool quantized, std::uint64_t seed = 1) {
  ModelConfig cfg;
  cfg.quantized = quantized;
  cfg.seed = seed;
  return build(cfg);
}

LayeredModel resnet(bool quantized) {
  ModelConfig cfg;
  cfg.arch = Arch::MiniResnet;
  cfg.in_channels = 3;
  cfg.width = 4;
  cfg.quantized = quantized;
  cfg.seed = 2;
  return build(cfg);
}

void zero_out(Tensor t) {
  for (float& v : t.mutable_data()) v = 0.0f;
}

}  // namespace

TEST_CASE("output shapes") {
  CHECK(forward(toy(false), images(0, 8, 1, 28)).shape() == Shape{8, 10});
  CHECK(forward(resnet(false), images(0, 2, 3, 32)).shape() == Shape{2, 10});
  CHECK_THROWS_AS(forward(toy(false), images(0, 2, 3, 28)), ShapeError);
  CHECK_THROWS_AS(arch_from_string("vgg"), ConfigError);
}

TEST_CASE("one tap per conv, aligned between teacher and student") {
  LayeredModel teacher = resnet(false);
  LayeredModel student = resnet(true);
  Tensor x = images(1, 2, 3, 16);
  calibrate_model(student, x);
  auto t = forward_with_taps(teacher, x);
  auto s = forward_with_taps(student, x);
  REQUIRE(t.taps.size() == teacher.conv_count());
  REQUIRE(s.taps.size() == 6);
  for (std::size_t i = 0; i < t.taps.size(); ++i) CHECK(t.taps[i].shape() == s.taps[i].shape());
}

TEST_CASE("build is deterministic under the seed") {
  auto a = toy(false, 5), b = toy(false, 5), c = toy(false, 6);
  CHECK(a.convs[2].weight.to_vector() == b.convs[2].weight.to_vector());
  CHECK(a.convs[2].weight.to_vector() != c.convs[2].weight.to_vector());
  CHECK(a.conv_count() == 4);
  CHECK(a.convs[3].weight.shape() == Shape{32, 16, 3, 3});
}

TEST_CASE("residual blocks with zero branches reduce to the skip path") {
  LayeredModel m = resnet(false);
  zero_out(m.convs[2].weight);
  zero_out(m.convs[4].weight);
  Tensor x = images(2, 2, 3, 16);
  auto affine = [&](std::size_t i, const Tensor& z) { return channel_affine(z, m.convs[i].gamma, m.convs[i].beta); };
  Tensor h = relu(affine(0, conv2d(x, m.convs[0].weight, m.convs[0].geom)));
  Tensor skip = relu(affine(5, conv2d(h, m.convs[5].weight, m.convs[5].geom)));
  Tensor expected = linear(global_avg_pool(skip), m.fc.weight, m.fc.bias);
  auto got = forward(m, x).to_vector();
  auto want = expected.to_vector();
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-5));
}

TEST_CASE("inert policies leave logits bit-identical") {
  LayeredModel student = toy(true);
  Tensor x = images(3, 4, 1, 12);
  calibrate_model(student, x);
  const auto clean = forward(student, x).to_vector();
  Rng rng(1);
  PerturbPolicy off;
  CHECK(forward_with_taps(student, x, {Mode::Train, &off, &rng}).logits.to_vector() == clean);
  PerturbPolicy zero{.p = 0.0, .target = PerturbTarget::Features};
  CHECK(forward_with_taps(student, x, {Mode::Train, &zero, &rng}).logits.to_vector() == clean);
  PerturbPolicy full{.p = 1.0, .target = PerturbTarget::Features};
  CHECK(forward_with_taps(student, x, {Mode::Eval, &full, &rng}).logits.to_vector() == clean);
}

TEST_CASE("perturbed forwards are reproducible and actually perturb") {
  LayeredModel student = toy(true);
  Tensor x = images(4, 4, 1, 12);
  calibrate_model(student, x);
  PerturbPolicy full{.p = 1.0, .target = PerturbTarget::Features};
  Rng r1(9), r2(9);
  auto a = forward_with_taps(student, x, {Mode::Train, &full, &r1});
  auto b = forward_with_taps(student, x, {Mode::Train, &full, &r2});
  CHECK(a.logits.to_vector() == b.logits.to_vector());
  CHECK(a.logits.to_vector() != forward(student, x).to_vector());
  for (bool fired : a.perturbed) CHECK(fired);

  PerturbPolicy weights{.p = 1.0, .target = PerturbTarget::Weights};
  Rng r3(9);
  auto w = forward_with_taps(student, x, {Mode::Train, &weights, &r3});
  CHECK(w.logits.to_vector() != forward(student, x).to_vector());

  PerturbPolicy scoped{.p = 1.0, .target = PerturbTarget::Features, .scope = {1, 2, 3}};
  Rng r4(9);
  auto s = forward_with_taps(student, x, {Mode::Train, &scoped, &r4});
  CHECK_FALSE(s.perturbed[0]);
  CHECK(s.perturbed[1]);
}

TEST_CASE("first and last layers keep 8 bits") {
  LayeredModel student = toy(true);
  CHECK(student.convs.front().bits.weight_bits == 8);
  CHECK(student.convs.front().bits.activation_bits == 8);
  CHECK(student.convs[1].bits.weight_bits == 4);
  CHECK(student.fc.bits.weight_bits == 8);
}

TEST_CASE("calibration bounds and frozen zero-points") {
  LayeredModel student = toy(true);
  for (auto& u : student.convs) {
    for (float& v : u.weight.mutable_data()) v = std::clamp(v, -1.0f, 1.0f);
  }
  Tensor x = images(5, 6, 1, 12);
  calibrate_model(student, x);
  for (std::size_t i = 1; i < student.convs.size(); ++i) {
    const auto& u = student.convs[i];
    for (float s : u.weight_q.scale.data()) CHECK(s <= 2.0f / 15.0f + 1e-7f);
    // inputs after relu start at zero
    CHECK(u.activation_q.zero_point[0] == 0);
  }
  CHECK(student.convs[0].activation_q.zero_point[0] > 0);
  CHECK_THROWS_AS(calibrate_model(student, x), Error);
  LayeredModel fp = toy(false);
  CHECK_THROWS_AS(calibrate_model(fp, x), Error);
}

TEST_CASE("first-layer quantization error stays within the snapping bound") {
  LayeredModel teacher = toy(false);
  LayeredModel student = toy(true);
  Tensor x = images(6, 3, 1, 10);
  calibrate_model(student, x);
  auto t = forward_with_taps(teacher, x).taps[0].to_vector();
  auto s = forward_with_taps(student, x).taps[0].to_vector();
  const auto& u = student.convs[0];
  const double sa = u.activation_q.scale.item();
  double max_x = 0.0;
  for (float v : x.data()) max_x = std::max(max_x, std::fabs(double(v)));
  const std::int64_t per_channel = 9;
  const std::int64_t plane = 100;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto c = static_cast<std::size_t>((static_cast<std::int64_t>(i) / plane) % u.out_channels);
    double wsum = 0.0;
    for (std::int64_t k = 0; k < per_channel; ++k) wsum += std::fabs(u.weight.data()[c * per_channel + k]);
    const double sw = u.weight_q.scale.data()[c];
    const double bound = wsum * sa / 2 + per_channel * (max_x + sa / 2) * sw / 2 + 1e-5;
    CHECK(std::fabs(double(t[i]) - s[i]) <= bound);
  }
}

TEST_CASE("copied weights make an unquantized student match the teacher") {
  LayeredModel teacher = toy(false, 3);
  LayeredModel student = toy(false, 4);
  copy_weights(teacher, student);
  Tensor x = images(7, 2, 1, 12);
  CHECK(forward(student, x).to_vector() == forward(teacher, x).to_vector());
  LayeredModel copy = teacher.clone();
  copy.convs[0].weight.mutable_data()[0] += 1.0f;
  CHECK(copy.convs[0].weight.data()[0] != teacher.convs[0].weight.data()[0]);
  LayeredModel other = resnet(false);
  CHECK_THROWS_AS(copy_weights(teacher, other), ShapeError);
}

TEST_CASE("student gradients reach weights and scales") {
  LayeredModel student = toy(true);
  Tensor x = images(8, 4, 1, 12);
  calibrate_model(student, x);
  auto params = student.scale_parameters();
  REQUIRE(params.size() == 10);
  params.push_back(student.convs[1].weight);
  auto grads = grad(sum(square(forward(student, x))), params);
  double total = 0.0;
  for (const auto& g : grads) {
    for (float v : g.data()) total += std::fabs(v);
  }
  CHECK(total > 0.0);
  auto gw = grads.back().to_vector();
  CHECK(std::any_of(gw.begin(), gw.end(), [](float v) { return v != 0.0f; }));
}

TEST_CASE("smooth twin shares weights and has no kinks issue") {
  LayeredModel m = toy(false);
  LayeredModel twin = m.with_activation(Activation::SmoothRelu);
  CHECK(twin.convs[0].weight.impl() == m.convs[0].weight.impl());
  Tensor x = images(9, 2, 1, 8);
  auto a = forward(m, x).to_vector();
  auto b = forward(twin, x).to_vector();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::fabs(a[i] - b[i]) < 0.5);
  CHECK(min_kink_margin(m, x) >= 0.0f);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  LayeredModel student = resnet(true);
  Tensor x = images(10, 2, 3, 8);
  calibrate_model(student, x);
  Checkpoint ckpt;
  save_model(ckpt, student);
  ckpt.put_string("meta", "{\"epoch\": 3}");
  ckpt.put_i64("epoch", 3);
  const auto path = (std::filesystem::temp_directory_path() / "fpq_test_ckpt.bin").string();
  ckpt.save(path);
  Checkpoint back = Checkpoint::load(path);
  std::remove(path.c_str());
  CHECK(back.serialize() == ckpt.serialize());
  LayeredModel loaded = load_model(back);
  CHECK(loaded.calibrated);
  CHECK(forward(loaded, x).to_vector() == forward(student, x).to_vector());
  CHECK(loaded.convs[3].weight_q.zero_point == student.convs[3].weight_q.zero_point);
  CHECK(loaded.convs[3].weight_q.scale.requires_grad());
  CHECK(back.i64("epoch") == 3);
  CHECK(back.str("meta") == "{\"epoch\": 3}");
}

TEST_CASE("checkpoint decoding errors") {
  Checkpoint ckpt;
  ckpt.put("w", Tensor::from({2, 2}, {1, 2, 3, 4}));
  auto bytes = ckpt.serialize();
  auto bad_version = bytes;
  bad_version[0] = 7;
  CHECK_THROWS_AS(Checkpoint::deserialize(bad_version), VersionError);
  auto bad_magic = bytes;
  bad_magic[1] = 'X';
  CHECK_THROWS_AS(Checkpoint::deserialize(bad_magic), ParseError);
  auto truncated = std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 3);
  try {
    Checkpoint::deserialize(truncated);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.offset() > 0);
    CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
  }
  CHECK_THROWS_AS(ckpt.tensor("missing"), Error);
}
