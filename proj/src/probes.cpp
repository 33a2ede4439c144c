#include "fpq/probes.hpp"

#include <cmath>

#include "fpq/error.hpp"
#include "fpq/ops.hpp"

namespace fpq {

namespace {

double dot(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto x = a[i].data();
    auto y = b[i].data();
    for (std::size_t k = 0; k < x.size(); ++k) acc += static_cast<double>(x[k]) * y[k];
  }
  return acc;
}

std::int64_t total_size(const std::vector<Tensor>& params) {
  std::int64_t n = 0;
  for (const auto& p : params) n += p.numel();
  return n;
}

// H v for a fixed first-order gradient graph `g`.
std::vector<Tensor> hvp(const std::vector<Tensor>& g, const std::vector<Tensor>& params, const std::vector<Tensor>& v) {
  Tensor gv = Tensor::zeros({1});
  for (std::size_t i = 0; i < g.size(); ++i) gv = add(gv, sum(mul(g[i], v[i])));
  if (!gv.requires_grad()) {
    // Gradient does not depend on the parameters: zero curvature.
    std::vector<Tensor> zeros;
    for (const auto& p : params) zeros.push_back(Tensor::zeros(p.shape()));
    return zeros;
  }
  return grad(gv, params);
}

std::vector<Tensor> first_order(const LossClosure& loss, const std::vector<Tensor>& params) {
  EnableGradGuard enable;
  Tensor l = loss();
  if (l.numel() != 1) throw ShapeError("probe: loss closure must return a scalar");
  return grad(l, params, /*create_graph=*/true);
}

void check_finite(const std::vector<Tensor>& hv, const char* probe, int index) {
  for (const auto& t : hv) {
    for (float v : t.data()) {
      if (!std::isfinite(v)) {
        throw NonFiniteError(std::string(probe) + ": Hessian-vector product is non-finite at probe " +
                             std::to_string(index));
      }
    }
  }
}

}  // namespace

TraceEstimate hutchinson_trace(const LossClosure& loss, const std::vector<Tensor>& params, int n_probes, Rng& rng) {
  if (n_probes < 1) throw Error("hutchinson_trace: need at least one probe");
  auto g = first_order(loss, params);
  double sum = 0.0, sum_sq = 0.0;
  for (int k = 0; k < n_probes; ++k) {
    std::vector<Tensor> v;
    for (const auto& p : params) {
      std::vector<float> signs(static_cast<std::size_t>(p.numel()));
      for (auto& s : signs) s = rng.bernoulli(0.5) ? 1.0f : -1.0f;
      v.push_back(Tensor::from(p.shape(), std::move(signs)));
    }
    auto hv = hvp(g, params, v);
    check_finite(hv, "hutchinson_trace", k);
    const double q = dot(v, hv);
    sum += q;
    sum_sq += q * q;
  }
  TraceEstimate est;
  est.probes = n_probes;
  est.mean = sum / n_probes;
  if (n_probes > 1) {
    const double var = std::max(0.0, (sum_sq - n_probes * est.mean * est.mean) / (n_probes - 1));
    est.std_error = std::sqrt(var / n_probes);
  }
  return est;
}

double exact_hessian_trace(const LossClosure& loss, const std::vector<Tensor>& params, double h) {
  const std::int64_t d = total_size(params);
  if (d > kExactTraceMaxParams) {
    throw Error("exact_hessian_trace: " + std::to_string(d) + " parameters exceed the limit of " +
                std::to_string(kExactTraceMaxParams));
  }
  auto gradient = [&] {
    EnableGradGuard enable;
    return grad(loss(), params);
  };
  double trace = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    for (std::int64_t k = 0; k < p.numel(); ++k) {
      float& w = p.mutable_data()[static_cast<std::size_t>(k)];
      const float original = w;
      w = static_cast<float>(original + h);
      const double step_up = static_cast<double>(w) - original;
      const double g_plus = gradient()[i].data()[static_cast<std::size_t>(k)];
      w = static_cast<float>(original - h);
      const double step_down = original - static_cast<double>(w);
      const double g_minus = gradient()[i].data()[static_cast<std::size_t>(k)];
      w = original;
      trace += (g_plus - g_minus) / (step_up + step_down);
    }
  }
  return trace;
}

double power_iteration_lambda_max(const LossClosure& loss, const std::vector<Tensor>& params, int iterations,
                                  Rng& rng) {
  if (iterations < 1) throw Error("power_iteration_lambda_max: need at least one iteration");
  auto g = first_order(loss, params);
  std::vector<Tensor> v;
  for (const auto& p : params) {
    std::vector<float> values(static_cast<std::size_t>(p.numel()));
    for (auto& x : values) x = rng.normal(0.0f, 1.0f);
    v.push_back(Tensor::from(p.shape(), std::move(values)));
  }
  double lambda = 0.0;
  for (int it = 0; it < iterations; ++it) {
    const double norm = std::sqrt(dot(v, v));
    if (norm == 0.0) return 0.0;
    for (auto& t : v) t = scale(t, static_cast<float>(1.0 / norm));
    auto hv = hvp(g, params, v);
    check_finite(hv, "power_iteration", it);
    lambda = dot(v, hv);
    v = hv;
  }
  return lambda;
}

SnapBound snap_loss_bound(const LossClosure& loss, const std::vector<Tensor>& params,
                          const std::vector<std::vector<float>>& target, int power_iterations, Rng& rng) {
  if (target.size() != params.size()) throw ShapeError("snap_loss_bound: one target per parameter is required");
  SnapBound out;
  out.lambda_max = std::fabs(power_iteration_lambda_max(loss, params, power_iterations, rng));
  double dist_sq = 0.0;
  std::vector<std::vector<float>> saved;
  {
    NoGradGuard no_grad;
    const double base = loss().item();
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor p = params[i];
      if (target[i].size() != static_cast<std::size_t>(p.numel())) throw ShapeError("snap_loss_bound: target size");
      saved.push_back(p.to_vector());
      auto data = p.mutable_data();
      for (std::size_t k = 0; k < data.size(); ++k) {
        const double d = static_cast<double>(target[i][k]) - data[k];
        dist_sq += d * d;
        data[k] = target[i][k];
      }
    }
    out.loss_increase = loss().item() - base;
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor p = params[i];
      std::copy(saved[i].begin(), saved[i].end(), p.mutable_data().begin());
    }
  }
  out.bound = 0.5 * dist_sq * out.lambda_max;
  return out;
}

std::string to_string(GradNormMode mode) {
  switch (mode) {
    case GradNormMode::None: return "none";
    case GradNormMode::Feature: return "feature-perturb";
    case GradNormMode::Weight: return "weight-perturb";
  }
  return "none";
}

GradNormMode grad_norm_mode_from_string(const std::string& name) {
  if (name == "none") return GradNormMode::None;
  if (name == "feature" || name == "feature-perturb") return GradNormMode::Feature;
  if (name == "weight" || name == "weight-perturb") return GradNormMode::Weight;
  throw ConfigError("unknown gradient-norm mode '" + name + "' (expected none, feature-perturb, weight-perturb)");
}

namespace {

std::vector<LayerTap> make_taps(const std::vector<Tensor>& student, const std::vector<Tensor>& teacher) {
  std::vector<LayerTap> taps;
  for (std::size_t i = 0; i < student.size(); ++i) taps.push_back({static_cast<int>(i), student[i], teacher[i]});
  return taps;
}

std::vector<Tensor> teacher_taps(const ProbeLoss& loss, const Tensor& images) {
  if (!loss.teacher) return {};
  NoGradGuard no_grad;
  return forward_with_taps(*loss.teacher, images).taps;
}

Tensor student_loss(const ForwardResult& out, const std::vector<std::int32_t>& labels,
                    const std::vector<Tensor>& t_taps, const ProbeLoss& loss) {
  if (t_taps.empty()) return softmax_cross_entropy(out.logits, labels);
  return total_loss(out.logits, labels, make_taps(out.taps, t_taps), loss.loss).loss;
}

}  // namespace

std::vector<double> grad_norm_trajectory(const LayeredModel& student, const Dataset& data,
                                         const std::vector<std::vector<std::int64_t>>& batches, GradNormMode mode,
                                         double p, std::uint64_t seed, const ProbeLoss& loss) {
  PerturbPolicy policy;
  policy.p = p;
  policy.target = mode == GradNormMode::None      ? PerturbTarget::Off
                  : mode == GradNormMode::Feature ? PerturbTarget::Features
                                                  : PerturbTarget::Weights;
  policy.validate();
  Rng rng(seed);
  const auto params = student.weight_tensors();
  std::vector<double> norms;
  for (const auto& idx : batches) {
    Batch b = gather(data, idx);
    auto t_taps = teacher_taps(loss, b.images);
    EnableGradGuard enable;
    ForwardResult out = forward_with_taps(student, b.images, {Mode::Train, &policy, &rng, loss.teacher != nullptr});
    auto g = grad(student_loss(out, b.labels, t_taps, loss), params);
    norms.push_back(std::sqrt(dot(g, g)));
  }
  return norms;
}

StabilityReport stability_probe(const LayeredModel& model, const Tensor& inputs, double sigma, int trials, Rng& rng) {
  return stability_probe([&](const Tensor& x) { return forward(model, x); }, inputs, sigma, trials, rng);
}

StabilityReport stability_probe(const std::function<Tensor(const Tensor&)>& f, const Tensor& inputs, double sigma,
                                int trials, Rng& rng) {
  if (trials < 2) throw Error("stability_probe: need at least two trials");
  if (sigma < 0.0) throw Error("stability_probe: sigma must be non-negative");
  NoGradGuard no_grad;
  std::vector<double> sum, sum_sq;
  for (int t = 0; t < trials; ++t) {
    Tensor x = inputs;
    if (sigma > 0.0) {
      std::vector<float> noisy = inputs.to_vector();
      for (auto& v : noisy) v += rng.normal(0.0f, static_cast<float>(sigma));
      x = Tensor::from(inputs.shape(), std::move(noisy));
    }
    Tensor out = f(x);
    auto y = out.data();
    if (sum.empty()) {
      sum.assign(y.size(), 0.0);
      sum_sq.assign(y.size(), 0.0);
    }
    for (std::size_t i = 0; i < y.size(); ++i) {
      sum[i] += y[i];
      sum_sq[i] += static_cast<double>(y[i]) * y[i];
    }
  }
  double var = 0.0;
  for (std::size_t i = 0; i < sum.size(); ++i) {
    const double m = sum[i] / trials;
    var += std::max(0.0, (sum_sq[i] - trials * m * m) / (trials - 1));
  }
  return {sigma, var / static_cast<double>(sum.size()), trials};
}

ModelTrace model_hessian_trace(const LayeredModel& student, const Batch& batch, int n_probes, Rng& rng,
                               const ProbeLoss& loss) {
  ModelTrace out;
  out.kink_margin = min_kink_margin(student, batch.images);
  const bool twin = student.activation == Activation::Relu && out.kink_margin < 1e-2f;
  out.smooth_twin = twin;
  const LayeredModel model = twin ? student.with_activation(Activation::SmoothRelu) : student;
  const auto t_taps = teacher_taps(loss, batch.images);
  const auto params = model.weight_tensors();
  LossClosure closure = [&] {
    ForwardResult r = forward_with_taps(model, batch.images, {Mode::Eval, nullptr, nullptr, !t_taps.empty()});
    return student_loss(r, batch.labels, t_taps, loss);
  };
  out.estimate = hutchinson_trace(closure, params, n_probes, rng);
  out.description = std::string("loss=") + (t_taps.empty() ? "ce" : "ce+csd") +
                    " params=conv+linear weights activation=" + (twin ? "smooth-twin" : "model");
  return out;
}

}  // namespace fpq
