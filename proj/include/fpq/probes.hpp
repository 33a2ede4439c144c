#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fpq/data.hpp"
#include "fpq/distillation.hpp"
#include "fpq/model.hpp"
#include "fpq/perturbation.hpp"
#include "fpq/tensor.hpp"

namespace fpq {

// Recomputes a scalar loss from the current values of some parameter leaves.
using LossClosure = std::function<Tensor()>;

struct TraceEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  int probes = 0;
};

// Mean of v^T H v over Rademacher probes v, with H v obtained by
// differentiating (grad L . v) a second time. Weights are left untouched.
TraceEstimate hutchinson_trace(const LossClosure& loss, const std::vector<Tensor>& params, int n_probes, Rng& rng);

// Trace from central differences of the gradient along every coordinate.
// Refuses more than kExactTraceMaxParams parameters.
inline constexpr std::int64_t kExactTraceMaxParams = 2000;
double exact_hessian_trace(const LossClosure& loss, const std::vector<Tensor>& params, double h = 1e-3);

// Largest Hessian eigenvalue (by magnitude) via power iteration on H v.
double power_iteration_lambda_max(const LossClosure& loss, const std::vector<Tensor>& params, int iterations,
                                  Rng& rng);

// Loss increase when the parameters move from their current values w* to
// `target`, against the second-order bound 1/2 ||target - w*||^2 lambda_max.
struct SnapBound {
  double loss_increase = 0.0;
  double bound = 0.0;
  double lambda_max = 0.0;
};
SnapBound snap_loss_bound(const LossClosure& loss, const std::vector<Tensor>& params,
                          const std::vector<std::vector<float>>& target, int power_iterations, Rng& rng);

enum class GradNormMode { None, Feature, Weight };
std::string to_string(GradNormMode mode);
GradNormMode grad_norm_mode_from_string(const std::string& name);

struct ProbeLoss {
  // Adds the CSD term against this teacher when set.
  const LayeredModel* teacher = nullptr;
  TotalLossOptions loss;
};

// Per-batch ||grad_w L||_2 over the student's weight tensors in training mode
// with the chosen perturbation (probability p per layer). Weights unchanged.
std::vector<double> grad_norm_trajectory(const LayeredModel& student, const Dataset& data,
                                         const std::vector<std::vector<std::int64_t>>& batches, GradNormMode mode,
                                         double p, std::uint64_t seed, const ProbeLoss& loss = {});

struct StabilityReport {
  double sigma = 0.0;
  double variance = 0.0;  // logit variance across trials, averaged over samples and classes
  int trials = 0;
};

// Adds N(0, sigma^2) to the inputs in each trial (eval mode) and measures the
// spread of the logits.
StabilityReport stability_probe(const LayeredModel& model, const Tensor& inputs, double sigma, int trials, Rng& rng);
StabilityReport stability_probe(const std::function<Tensor(const Tensor&)>& f, const Tensor& inputs, double sigma,
                                int trials, Rng& rng);

// Hutchinson trace of the student's loss Hessian over its conv/linear
// weights on one batch, evaluated without perturbation. Relu models whose
// pre-activations come within 1e-2 of a kink are swapped for the smooth twin.
struct ModelTrace {
  TraceEstimate estimate;
  bool smooth_twin = false;
  float kink_margin = 0.0f;
  std::string description;
};
ModelTrace model_hessian_trace(const LayeredModel& student, const Batch& batch, int n_probes, Rng& rng,
                               const ProbeLoss& loss = {});

}  // namespace fpq
