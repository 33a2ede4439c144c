#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fpq/ops.hpp"
#include "fpq/perturbation.hpp"
#include "fpq/quantizer.hpp"
#include "fpq/tensor.hpp"

namespace fpq {

enum class Arch { ToyCnn, MiniResnet };
// Relu for training; SmoothRelu is softplus(beta x) / beta, a twice
// differentiable stand-in used by curvature probes.
enum class Activation { Relu, SmoothRelu };

std::string to_string(Arch arch);
Arch arch_from_string(const std::string& name);

inline constexpr float kSmoothReluBeta = 10.0f;

struct ConvUnit {
  std::string name;
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  ConvGeometry geom;
  Tensor weight;  // (out, in, k, k)
  Tensor gamma;   // (out) per-channel scale after the conv
  Tensor beta;    // (out) per-channel shift
  QuantizedLayerConfig bits;
  QuantSpec weight_q;      // per-channel over output channels
  QuantSpec activation_q;  // per-tensor on the conv input
};

struct LinearUnit {
  Tensor weight;  // (classes, features)
  Tensor bias;    // (classes)
  QuantizedLayerConfig bits;
  QuantSpec weight_q;
  QuantSpec activation_q;
};

struct ModelConfig {
  Arch arch = Arch::ToyCnn;
  std::int64_t in_channels = 1;
  std::int64_t num_classes = 10;
  // Channel base: toy-cnn uses (w, 2w, 2w, 4w), mini-resnet (w, w, w, 2w, 2w, 2w).
  std::int64_t width = 8;
  bool quantized = false;
  int weight_bits = 4;
  int activation_bits = 4;
  bool keep_edges_8bit = true;
  std::uint64_t seed = 0;
};

// Plain conv stack or a stem plus two residual blocks, each conv followed by a
// per-channel affine and the activation, then global average pooling and a
// linear classifier. Teacher and student share this topology; the student adds
// fake quantization of every conv/linear weight and input.
struct LayeredModel {
  ModelConfig config;
  Activation activation = Activation::Relu;
  std::vector<ConvUnit> convs;
  LinearUnit fc;
  bool calibrated = false;

  bool quantized() const { return config.quantized; }
  std::size_t conv_count() const { return convs.size(); }

  // Weights that take weight decay: conv and linear weights, affines, bias.
  std::vector<Tensor> weight_parameters() const;
  // Learnable quantization scales (student after calibration).
  std::vector<Tensor> scale_parameters() const;
  // Conv and linear weight tensors only (the curvature probes' parameter set).
  std::vector<Tensor> weight_tensors() const;
  std::int64_t parameter_count() const;

  // Deep copy; the copy shares no storage with this model.
  LayeredModel clone() const;
  // Same weights and quantizers (shared storage), different activation.
  LayeredModel with_activation(Activation act) const;
};

// Deterministic topology; weights from fan-in scaled uniform init under
// config.seed. Throws ConfigError for invalid sizes.
LayeredModel build(const ModelConfig& config);

// Copies every conv/affine/linear weight of `from` into `to` (same topology).
void copy_weights(const LayeredModel& from, LayeredModel& to);

struct ForwardOptions {
  Mode mode = Mode::Eval;
  const PerturbPolicy* policy = nullptr;
  Rng* rng = nullptr;
  bool capture_taps = true;
};

struct ForwardResult {
  Tensor logits;
  // Conv outputs before the affine, one per conv unit in order.
  std::vector<Tensor> taps;
  // Whether the perturbation fired at each conv unit.
  std::vector<bool> perturbed;
};

// Forward pass exposing every conv output. In Train mode with a policy the
// student's conv inputs (after activation fake-quant) receive
// U[-s/2, s/2] noise per Bernoulli(p) coin, s being that input's quantizer
// scale; a Weights policy perturbs the fake-quantized weights instead with
// their per-channel scales. Eval mode never perturbs.
ForwardResult forward_with_taps(const LayeredModel& model, const Tensor& x, const ForwardOptions& options = {});

Tensor forward(const LayeredModel& model, const Tensor& x);

// Per conv unit (then the linear layer) min/max of the layer input, observed
// without quantization. Used for activation calibration.
struct ActivationRanges {
  std::vector<float> mins;
  std::vector<float> maxs;
};
ActivationRanges observe_activation_ranges(const LayeredModel& model, const Tensor& x);

// Calibrates every weight quantizer (per-channel min/max of the weights) and
// every activation quantizer (per-tensor min/max of the layer inputs observed
// on `calibration_images`), asymmetric by default. Zero-points are frozen
// afterwards: a second call throws. Returns degenerate-range warnings.
std::vector<std::string> calibrate_model(LayeredModel& student, const Tensor& calibration_images,
                                         QuantMode mode = QuantMode::Asymmetric,
                                         ZeroPointInit zero_point_init = ZeroPointInit::MaxOnly);

// Smallest |pre-activation| over all activation sites on input x; a value
// below 1e-2 means a relu kink is too close for curvature probes.
float min_kink_margin(const LayeredModel& model, const Tensor& x);

}  // namespace fpq
