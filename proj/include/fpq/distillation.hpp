#pragma once

#include <cstdint>
#include <vector>

#include "fpq/tensor.hpp"

namespace fpq {

inline constexpr float kStandardizeEps = 1e-5f;

// Student and teacher outputs of one layer, both (N, C, spatial...) or (N, C).
struct LayerTap {
  int layer = 0;
  Tensor student;
  Tensor teacher;
};

// Sum: squared distance summed over every element of every layer.
// Mean: each layer's squared distance divided by its element count, so every
// layer contributes at most ~4 regardless of batch size and resolution.
enum class CsdReduction { Sum, Mean };

struct CsdOptions {
  float eps = kStandardizeEps;
  CsdReduction reduction = CsdReduction::Sum;
};

// Per-channel standardization over batch and spatial positions jointly:
// (z - mean_c) / sqrt(var_c + eps) with the population variance.
Tensor standardize(const Tensor& z, float eps = kStandardizeEps);

// sum over layers and channels of ||standardize(teacher) - standardize(student)||^2.
// The teacher side is detached. Shape mismatches name the offending layer.
Tensor csd_loss(const std::vector<LayerTap>& taps, const CsdOptions& options = {});

struct LossBreakdown {
  double ce = 0.0;
  double csd = 0.0;
  double total = 0.0;
  // Differentiable total, ce + csd_weight * csd.
  Tensor loss;
};

struct TotalLossOptions {
  CsdOptions csd;
  float csd_weight = 1.0f;
};

LossBreakdown total_loss(const Tensor& student_logits, const std::vector<std::int32_t>& labels,
                         const std::vector<LayerTap>& taps, const TotalLossOptions& options = {});

}  // namespace fpq
