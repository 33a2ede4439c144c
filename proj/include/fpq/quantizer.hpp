#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fpq/tensor.hpp"

namespace fpq {

enum class Granularity { PerTensor, PerChannel };

// Asymmetric uses the unsigned grid [0, 2^q - 1] with a calibrated zero-point.
// Symmetric uses the signed grid [-2^(q-1), 2^(q-1) - 1] with z = 0.
enum class QuantMode { Asymmetric, Symmetric };

// How the zero-point is derived from the calibration range. MaxOnly is
// z = round(q_max - x_max / s); FromMin is the textbook z = round(-x_min / s).
enum class ZeroPointInit { MaxOnly, FromMin };

inline constexpr float kMinScale = 1e-8f;

struct QuantSpec {
  int bits = 8;
  Granularity granularity = Granularity::PerTensor;
  QuantMode mode = QuantMode::Asymmetric;
  // Shape {1} for per-tensor, {channels} for per-channel (axis 0). A leaf that
  // requires grad when learnable.
  Tensor scale;
  std::vector<std::int32_t> zero_point;

  int qmin() const;
  int qmax() const;
  std::size_t entries() const { return zero_point.size(); }
  bool learnable() const { return scale.defined() && scale.requires_grad(); }
};

struct CalibrationOptions {
  int bits = 8;
  Granularity granularity = Granularity::PerTensor;
  QuantMode mode = QuantMode::Asymmetric;
  ZeroPointInit zero_point_init = ZeroPointInit::MaxOnly;
  bool learnable = true;
};

struct Calibration {
  QuantSpec spec;
  // One message per scale entry whose range collapsed to a point.
  std::vector<std::string> warnings;
};

// Min/max calibration. Per-channel statistics are taken over axis 0.
// A constant range falls back to s = 1e-8 with a warning.
Calibration calibrate(const Tensor& samples, const CalibrationOptions& options);

// Same, from already-reduced ranges (one min/max per scale entry).
Calibration calibrate_from_range(const std::vector<float>& mins, const std::vector<float>& maxs,
                                 const CalibrationOptions& options);

// Quantize-dequantize: x_int = clip(round(x / s) + z, qmin, qmax),
// out = (x_int - z) * s with round-half-to-even. Recorded on the tape with the
// straight-through gradient for x and the learned-step-size gradient for s.
Tensor fake_quantize(const Tensor& x, const QuantSpec& spec);

struct FakeQuantGrads {
  Tensor grad_x;
  Tensor grad_s;  // same shape as spec.scale
};

// The two gradients of fake_quantize, evaluated numerically:
//  grad_x = upstream inside the clip range, 0 outside;
//  grad_s = sum of upstream * d out / d s with d/ds = round(x/s) - x/s inside
//           the range and (bound - z) on clipped entries, times the
//           gradient scale 1 / sqrt(N * q_max) (N = elements per scale entry).
FakeQuantGrads fake_quantize_backward(const Tensor& upstream, const Tensor& x,
                                      const QuantSpec& spec);

// 1 / sqrt(N * q_max) for a tensor of `numel` elements quantized by `spec`.
float lsq_grad_scale(std::int64_t numel, const QuantSpec& spec);

// Keeps every scale entry >= kMinScale (applied after optimizer steps).
void clamp_scale(QuantSpec& spec);

// Bit-widths of one quantized layer. Weights use per-channel scales and
// activations a per-tensor scale.
struct QuantizedLayerConfig {
  int weight_bits = 4;
  int activation_bits = 4;
  bool first_or_last = false;
};

// Bit assignment across `layer_count` quantized layers. When keep_edges_8bit
// is set the first and last layers use 8 bits for weights and activations.
std::vector<QuantizedLayerConfig> assign_layer_bits(std::size_t layer_count, int weight_bits,
                                                    int activation_bits, bool keep_edges_8bit);

}  // namespace fpq
