#include "fpq/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fpq/error.hpp"

namespace fpq {

std::string to_string(Arch arch) { return arch == Arch::ToyCnn ? "toy-cnn" : "mini-resnet"; }

Arch arch_from_string(const std::string& name) {
  if (name == "toy-cnn") return Arch::ToyCnn;
  if (name == "mini-resnet") return Arch::MiniResnet;
  throw ConfigError("unknown architecture '" + name + "' (expected toy-cnn or mini-resnet)");
}

namespace {

Tensor uniform_init(const Shape& shape, double bound, Rng& rng) {
  std::vector<float> values(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : values) v = rng.uniform(static_cast<float>(-bound), static_cast<float>(bound));
  Tensor t = Tensor::from(shape, std::move(values));
  t.set_requires_grad(true);
  return t;
}

Tensor leaf(Shape shape, float value) {
  Tensor t = Tensor::full(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

ConvUnit make_conv(std::string name, std::int64_t in, std::int64_t out, std::int64_t kernel,
                   std::int64_t stride, Rng& rng) {
  ConvUnit unit;
  unit.name = std::move(name);
  unit.in_channels = in;
  unit.out_channels = out;
  unit.geom = {kernel, stride, kernel / 2};
  // He-style bound for relu layers: U[-sqrt(6 / fan_in), sqrt(6 / fan_in)].
  unit.weight = uniform_init({out, in, kernel, kernel}, std::sqrt(6.0 / static_cast<double>(in * kernel * kernel)), rng);
  unit.gamma = leaf({out}, 1.0f);
  unit.beta = leaf({out}, 0.0f);
  return unit;
}

Tensor activate(const Tensor& x, Activation act) {
  if (act == Activation::Relu) return relu(x);
  return scale(softplus(scale(x, kSmoothReluBeta)), 1.0f / kSmoothReluBeta);
}

QuantSpec clone_spec(const QuantSpec& spec) {
  QuantSpec out = spec;
  if (spec.scale.defined()) {
    out.scale = spec.scale.detach();
    out.scale.set_requires_grad(spec.scale.requires_grad());
  }
  return out;
}

Tensor clone_leaf(const Tensor& t) {
  Tensor out = t.detach();
  out.set_requires_grad(t.requires_grad());
  return out;
}

struct Context {
  const LayeredModel& model;
  const ForwardOptions& options;
  ForwardResult* result = nullptr;
  ActivationRanges* observe = nullptr;
  float* kink_margin = nullptr;

  bool training() const { return options.mode == Mode::Train && options.policy && options.rng; }

  bool coin(PerturbTarget target, int layer) const {
    const PerturbPolicy& policy = *options.policy;
    if (policy.target != target || !policy.in_scope(layer)) return false;
    return options.rng->bernoulli(policy.p);
  }

  void observe_range(const Tensor& x) {
    auto [lo, hi] = std::minmax_element(x.data().begin(), x.data().end());
    observe->mins.push_back(*lo);
    observe->maxs.push_back(*hi);
  }

  Tensor act(const Tensor& x) {
    if (kink_margin) {
      for (float v : x.data()) *kink_margin = std::min(*kink_margin, std::fabs(v));
    }
    return activate(x, model.activation);
  }

  Tensor conv(std::size_t index, const Tensor& x) {
    const ConvUnit& unit = model.convs[index];
    const int layer = static_cast<int>(index);
    if (observe) observe_range(x);
    Tensor in = x;
    Tensor w = unit.weight;
    bool fired = false;
    if (model.quantized() && model.calibrated) {
      in = fake_quantize(in, unit.activation_q);
      w = fake_quantize(w, unit.weight_q);
      if (training() && options.policy->target == PerturbTarget::Features) {
        Perturbed p = maybe_perturb(in, unit.activation_q.scale.item(), *options.policy, *options.rng,
                                    Mode::Train, layer);
        in = p.value;
        fired = p.applied;
      } else if (training() && coin(PerturbTarget::Weights, layer)) {
        w = apply_weight_noise(w, unit.weight_q.scale.to_vector(), *options.rng);
        fired = true;
      }
    }
    Tensor z = conv2d(in, w, unit.geom);
    if (result) {
      if (options.capture_taps) result->taps.push_back(z);
      result->perturbed.push_back(fired);
    }
    return channel_affine(z, unit.gamma, unit.beta);
  }

  Tensor classifier(const Tensor& features) {
    const LinearUnit& fc = model.fc;
    if (observe) observe_range(features);
    Tensor in = features;
    Tensor w = fc.weight;
    if (model.quantized() && model.calibrated) {
      in = fake_quantize(in, fc.activation_q);
      w = fake_quantize(w, fc.weight_q);
    }
    return linear(in, w, fc.bias);
  }

  Tensor run(const Tensor& x) {
    const auto expected = model.config.in_channels;
    if (x.ndim() != 4 || x.dim(1) != expected) {
      throw ShapeError("forward: expected input (N, " + std::to_string(expected) + ", H, W), got " +
                       shape_str(x.shape()));
    }
    Tensor h;
    if (model.config.arch == Arch::ToyCnn) {
      h = x;
      for (std::size_t i = 0; i < model.convs.size(); ++i) h = act(conv(i, h));
    } else {
      h = act(conv(0, x));
      Tensor a = act(conv(1, h));
      h = act(add(conv(2, a), h));
      a = act(conv(3, h));
      Tensor branch = conv(4, a);
      Tensor skip = conv(5, h);
      h = act(add(branch, skip));
    }
    return classifier(global_avg_pool(h));
  }
};

}  // namespace

std::vector<Tensor> LayeredModel::weight_parameters() const {
  std::vector<Tensor> out;
  for (const auto& c : convs) {
    out.push_back(c.weight);
    out.push_back(c.gamma);
    out.push_back(c.beta);
  }
  out.push_back(fc.weight);
  out.push_back(fc.bias);
  return out;
}

std::vector<Tensor> LayeredModel::scale_parameters() const {
  std::vector<Tensor> out;
  if (!quantized() || !calibrated) return out;
  for (const auto& c : convs) {
    if (c.weight_q.learnable()) out.push_back(c.weight_q.scale);
    if (c.activation_q.learnable()) out.push_back(c.activation_q.scale);
  }
  if (fc.weight_q.learnable()) out.push_back(fc.weight_q.scale);
  if (fc.activation_q.learnable()) out.push_back(fc.activation_q.scale);
  return out;
}

std::vector<Tensor> LayeredModel::weight_tensors() const {
  std::vector<Tensor> out;
  for (const auto& c : convs) out.push_back(c.weight);
  out.push_back(fc.weight);
  return out;
}

std::int64_t LayeredModel::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& t : weight_parameters()) n += t.numel();
  return n;
}

LayeredModel LayeredModel::clone() const {
  LayeredModel out = *this;
  for (auto& c : out.convs) {
    c.weight = clone_leaf(c.weight);
    c.gamma = clone_leaf(c.gamma);
    c.beta = clone_leaf(c.beta);
    c.weight_q = clone_spec(c.weight_q);
    c.activation_q = clone_spec(c.activation_q);
  }
  out.fc.weight = clone_leaf(fc.weight);
  out.fc.bias = clone_leaf(fc.bias);
  out.fc.weight_q = clone_spec(fc.weight_q);
  out.fc.activation_q = clone_spec(fc.activation_q);
  return out;
}

LayeredModel LayeredModel::with_activation(Activation act) const {
  LayeredModel out = *this;
  out.activation = act;
  return out;
}

LayeredModel build(const ModelConfig& config) {
  if (config.in_channels < 1 || config.num_classes < 2 || config.width < 1) {
    throw ConfigError("build: in_channels >= 1, num_classes >= 2 and width >= 1 are required");
  }
  LayeredModel model;
  model.config = config;
  Rng rng(config.seed);
  const std::int64_t w = config.width;
  const std::int64_t c = config.in_channels;
  std::int64_t features = 0;
  if (config.arch == Arch::ToyCnn) {
    model.convs.push_back(make_conv("conv0", c, w, 3, 1, rng));
    model.convs.push_back(make_conv("conv1", w, 2 * w, 3, 2, rng));
    model.convs.push_back(make_conv("conv2", 2 * w, 2 * w, 3, 1, rng));
    model.convs.push_back(make_conv("conv3", 2 * w, 4 * w, 3, 2, rng));
    features = 4 * w;
  } else {
    model.convs.push_back(make_conv("stem", c, w, 3, 1, rng));
    model.convs.push_back(make_conv("block1.conv_a", w, w, 3, 1, rng));
    model.convs.push_back(make_conv("block1.conv_b", w, w, 3, 1, rng));
    model.convs.push_back(make_conv("block2.conv_a", w, 2 * w, 3, 2, rng));
    model.convs.push_back(make_conv("block2.conv_b", 2 * w, 2 * w, 3, 1, rng));
    model.convs.push_back(make_conv("block2.skip", w, 2 * w, 1, 2, rng));
    features = 2 * w;
  }
  model.fc.weight = uniform_init({config.num_classes, features}, 1.0 / std::sqrt(static_cast<double>(features)), rng);
  model.fc.bias = leaf({config.num_classes}, 0.0f);

  if (config.quantized) {
    // Layer order for the 8-bit edge rule: convs as built, then the classifier.
    auto bits = assign_layer_bits(model.convs.size() + 1, config.weight_bits, config.activation_bits,
                                  config.keep_edges_8bit);
    for (std::size_t i = 0; i < model.convs.size(); ++i) model.convs[i].bits = bits[i];
    model.fc.bits = bits.back();
  }
  return model;
}

void copy_weights(const LayeredModel& from, LayeredModel& to) {
  auto src = from.weight_parameters();
  auto dst = to.weight_parameters();
  if (src.size() != dst.size()) throw ShapeError("copy_weights: models have different topologies");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].shape() != dst[i].shape()) {
      throw ShapeError("copy_weights: parameter " + std::to_string(i) + " has shape " + shape_str(src[i].shape()) +
                       " vs " + shape_str(dst[i].shape()));
    }
    auto s = src[i].data();
    std::copy(s.begin(), s.end(), dst[i].mutable_data().begin());
  }
}

ForwardResult forward_with_taps(const LayeredModel& model, const Tensor& x, const ForwardOptions& options) {
  if (options.mode == Mode::Train && options.policy && options.policy->target != PerturbTarget::Off &&
      !options.rng) {
    throw Error("forward_with_taps: a perturbation policy needs an Rng");
  }
  if (options.policy) options.policy->validate();
  ForwardResult result;
  Context ctx{model, options};
  ctx.result = &result;
  result.logits = ctx.run(x);
  return result;
}

Tensor forward(const LayeredModel& model, const Tensor& x) {
  ForwardOptions options;
  options.capture_taps = false;
  return forward_with_taps(model, x, options).logits;
}

ActivationRanges observe_activation_ranges(const LayeredModel& model, const Tensor& x) {
  NoGradGuard no_grad;
  LayeredModel fp = model;
  fp.calibrated = false;  // observe unquantized values
  ForwardOptions options;
  ActivationRanges ranges;
  Context ctx{fp, options};
  ctx.observe = &ranges;
  ctx.run(x);
  return ranges;
}

std::vector<std::string> calibrate_model(LayeredModel& student, const Tensor& calibration_images, QuantMode mode,
                                         ZeroPointInit zero_point_init) {
  if (!student.quantized()) throw Error("calibrate_model: model was built without quantization");
  if (student.calibrated) throw Error("calibrate_model: already calibrated; zero-points are frozen");
  if (!calibration_images.defined() || calibration_images.numel() == 0) {
    throw Error("calibrate_model: empty calibration set");
  }
  std::vector<std::string> warnings;
  auto collect = [&](const std::string& where, Calibration cal, QuantSpec& dst) {
    for (auto& w : cal.warnings) warnings.push_back(where + ": " + w);
    dst = std::move(cal.spec);
  };
  const ActivationRanges ranges = observe_activation_ranges(student, calibration_images);
  for (std::size_t i = 0; i < student.convs.size(); ++i) {
    ConvUnit& u = student.convs[i];
    CalibrationOptions w_opts{u.bits.weight_bits, Granularity::PerChannel, mode, zero_point_init, true};
    collect(u.name + ".weight", calibrate(u.weight, w_opts), u.weight_q);
    CalibrationOptions a_opts{u.bits.activation_bits, Granularity::PerTensor, mode, zero_point_init, true};
    collect(u.name + ".input", calibrate_from_range({ranges.mins[i]}, {ranges.maxs[i]}, a_opts), u.activation_q);
  }
  LinearUnit& fc = student.fc;
  CalibrationOptions w_opts{fc.bits.weight_bits, Granularity::PerChannel, mode, zero_point_init, true};
  collect("fc.weight", calibrate(fc.weight, w_opts), fc.weight_q);
  CalibrationOptions a_opts{fc.bits.activation_bits, Granularity::PerTensor, mode, zero_point_init, true};
  collect("fc.input", calibrate_from_range({ranges.mins.back()}, {ranges.maxs.back()}, a_opts), fc.activation_q);
  student.calibrated = true;
  return warnings;
}

float min_kink_margin(const LayeredModel& model, const Tensor& x) {
  NoGradGuard no_grad;
  ForwardOptions options;
  float margin = std::numeric_limits<float>::infinity();
  Context ctx{model, options};
  ctx.kink_margin = &margin;
  ctx.run(x);
  return margin;
}

}  // namespace fpq
