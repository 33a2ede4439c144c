#include "fpq/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "fpq/error.hpp"
#include "fpq/ops.hpp"

namespace fpq {

int QuantSpec::qmin() const { return mode == QuantMode::Asymmetric ? 0 : -(1 << (bits - 1)); }

int QuantSpec::qmax() const {
  return mode == QuantMode::Asymmetric ? (1 << bits) - 1 : (1 << (bits - 1)) - 1;
}

namespace {

void validate_bits(int bits) {
  if (bits < 2 || bits > 16) throw ConfigError("quantizer: bit-width must be in [2, 16], got " + std::to_string(bits));
}

// Number of elements governed by each scale entry of `spec` in tensor x.
std::int64_t elements_per_entry(const Tensor& x, const QuantSpec& spec) {
  const auto entries = static_cast<std::int64_t>(spec.entries());
  if (spec.granularity == Granularity::PerTensor) {
    if (entries != 1) throw ShapeError("fake_quantize: per-tensor spec must hold one scale");
    return x.numel();
  }
  if (x.ndim() < 1 || x.dim(0) != entries) {
    throw ShapeError("fake_quantize: per-channel spec with " + std::to_string(entries) +
                     " channels does not match tensor " + shape_str(x.shape()));
  }
  return x.numel() / entries;
}

struct QuantPass {
  std::vector<float> out;
  std::vector<float> in_range;   // 1 inside the clip range, else 0
  std::vector<float> dout_ds;    // d out / d s per element (learned step size rule)
};

QuantPass quantize_values(const Tensor& x, const QuantSpec& spec, bool with_grads) {
  const std::int64_t per = elements_per_entry(x, spec);
  const double lo = spec.qmin(), hi = spec.qmax();
  auto in = x.data();
  auto scales = spec.scale.data();
  QuantPass pass;
  pass.out.resize(in.size());
  if (with_grads) {
    pass.in_range.resize(in.size());
    pass.dout_ds.resize(in.size());
  }
  const auto count = static_cast<std::size_t>(per);
  for (std::size_t begin = 0, entry = 0; begin < in.size(); begin += count, ++entry) {
    const double s = scales[entry];
    const double z = spec.zero_point[entry];
    const double inv_s = 1.0 / s;
    for (std::size_t i = begin; i < begin + count; ++i) {
      const double r = static_cast<double>(in[i]) * inv_s;
      const double rounded = std::nearbyint(r);
      const double level = std::clamp(rounded + z, lo, hi);
      pass.out[i] = static_cast<float>((level - z) * s);
      if (!with_grads) continue;
      const double position = r + z;
      if (position < lo) {
        pass.in_range[i] = 0.0f;
        pass.dout_ds[i] = static_cast<float>(lo - z);
      } else if (position > hi) {
        pass.in_range[i] = 0.0f;
        pass.dout_ds[i] = static_cast<float>(hi - z);
      } else {
        pass.in_range[i] = 1.0f;
        pass.dout_ds[i] = static_cast<float>(rounded - r);
      }
    }
  }
  return pass;
}

Tensor reduce_to_scale(const Tensor& per_element, const QuantSpec& spec, float grad_scale) {
  if (spec.granularity == Granularity::PerTensor) return scale(sum(per_element), grad_scale);
  return scale(sum_keep(per_element, 0), grad_scale);
}

}  // namespace

float lsq_grad_scale(std::int64_t numel, const QuantSpec& spec) {
  const auto entries = static_cast<std::int64_t>(std::max<std::size_t>(spec.entries(), 1));
  const double n = static_cast<double>(numel / entries);
  return static_cast<float>(1.0 / std::sqrt(n * spec.qmax()));
}

Calibration calibrate_from_range(const std::vector<float>& mins, const std::vector<float>& maxs,
                                 const CalibrationOptions& options) {
  validate_bits(options.bits);
  if (mins.empty() || mins.size() != maxs.size()) {
    throw Error("calibrate: need one non-empty min/max pair per scale entry");
  }
  Calibration result;
  QuantSpec& spec = result.spec;
  spec.bits = options.bits;
  spec.granularity = options.granularity;
  spec.mode = options.mode;
  const double levels = std::ldexp(1.0, options.bits) - 1.0;
  const int qmax = spec.qmax();
  std::vector<float> scales(mins.size());
  spec.zero_point.resize(mins.size());
  for (std::size_t c = 0; c < mins.size(); ++c) {
    const double lo = mins[c], hi = maxs[c];
    double s = 0.0;
    if (options.mode == QuantMode::Asymmetric) {
      s = (hi - lo) / levels;
    } else {
      s = std::max(std::fabs(lo), std::fabs(hi)) / static_cast<double>(qmax);
    }
    if (!(s > 0.0) || static_cast<float>(s) < kMinScale) {
      std::ostringstream msg;
      msg << "degenerate calibration range [" << lo << ", " << hi << "] for entry " << c
          << "; scale set to " << kMinScale;
      result.warnings.push_back(msg.str());
      s = kMinScale;
    }
    scales[c] = static_cast<float>(s);
    if (options.mode == QuantMode::Symmetric) {
      spec.zero_point[c] = 0;
      continue;
    }
    const double s_used = scales[c];
    double z = options.zero_point_init == ZeroPointInit::MaxOnly ? std::nearbyint(qmax - hi / s_used)
                                                                  : std::nearbyint(-lo / s_used);
    // Not clamped to the grid: a one-sided range (all weights of a channel
    // negative, say) needs z outside [0, qmax] to keep both ends representable.
    spec.zero_point[c] = static_cast<std::int32_t>(z);
  }
  const auto count = static_cast<std::int64_t>(scales.size());
  spec.scale = Tensor::from({count}, std::move(scales));
  spec.scale.set_requires_grad(options.learnable);
  return result;
}

Calibration calibrate(const Tensor& samples, const CalibrationOptions& options) {
  if (!samples.defined() || samples.numel() == 0) throw Error("calibrate: empty calibration samples");
  auto values = samples.data();
  std::int64_t entries = 1;
  if (options.granularity == Granularity::PerChannel) {
    if (samples.ndim() < 1) throw ShapeError("calibrate: per-channel needs a leading channel axis");
    entries = samples.dim(0);
  }
  const std::int64_t per = samples.numel() / entries;
  std::vector<float> mins(static_cast<std::size_t>(entries)), maxs(static_cast<std::size_t>(entries));
  for (std::int64_t c = 0; c < entries; ++c) {
    auto first = values.begin() + c * per;
    auto [lo, hi] = std::minmax_element(first, first + per);
    mins[static_cast<std::size_t>(c)] = *lo;
    maxs[static_cast<std::size_t>(c)] = *hi;
  }
  return calibrate_from_range(mins, maxs, options);
}

Tensor fake_quantize(const Tensor& x, const QuantSpec& spec) {
  if (!spec.scale.defined()) throw Error("fake_quantize: spec is not calibrated");
  const bool track = grad_enabled() && (x.requires_grad() || spec.scale.requires_grad());
  QuantPass pass = quantize_values(x, spec, track);
  if (!track) return make_result("fake_quantize", x.shape(), std::move(pass.out), {}, nullptr);

  Tensor mask = Tensor::from(x.shape(), std::move(pass.in_range));
  Tensor dout_ds = Tensor::from(x.shape(), std::move(pass.dout_ds));
  const float grad_scale = lsq_grad_scale(x.numel(), spec);
  QuantSpec saved = spec;
  return make_result("fake_quantize", x.shape(), std::move(pass.out), {x, spec.scale},
                     [mask, dout_ds, grad_scale, saved](const Tensor& g) {
                       return std::vector<Tensor>{mul(g, mask),
                                                  reduce_to_scale(mul(g, dout_ds), saved, grad_scale)};
                     });
}

FakeQuantGrads fake_quantize_backward(const Tensor& upstream, const Tensor& x, const QuantSpec& spec) {
  if (upstream.shape() != x.shape()) {
    throw ShapeError("fake_quantize_backward: upstream " + shape_str(upstream.shape()) +
                     " does not match input " + shape_str(x.shape()));
  }
  NoGradGuard no_grad;
  QuantPass pass = quantize_values(x, spec, true);
  Tensor mask = Tensor::from(x.shape(), std::move(pass.in_range));
  Tensor dout_ds = Tensor::from(x.shape(), std::move(pass.dout_ds));
  const float grad_scale = lsq_grad_scale(x.numel(), spec);
  return {mul(upstream, mask), reduce_to_scale(mul(upstream, dout_ds), spec, grad_scale)};
}

void clamp_scale(QuantSpec& spec) {
  for (float& s : spec.scale.mutable_data()) s = std::max(s, kMinScale);
}

std::vector<QuantizedLayerConfig> assign_layer_bits(std::size_t layer_count, int weight_bits,
                                                    int activation_bits, bool keep_edges_8bit) {
  validate_bits(weight_bits);
  validate_bits(activation_bits);
  std::vector<QuantizedLayerConfig> configs(layer_count);
  for (std::size_t i = 0; i < layer_count; ++i) {
    const bool edge = i == 0 || i + 1 == layer_count;
    configs[i].first_or_last = edge;
    configs[i].weight_bits = keep_edges_8bit && edge ? 8 : weight_bits;
    configs[i].activation_bits = keep_edges_8bit && edge ? 8 : activation_bits;
  }
  return configs;
}

}  // namespace fpq
