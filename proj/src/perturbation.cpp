#include "fpq/perturbation.hpp"

#include <cmath>
#include <sstream>

#include "fpq/error.hpp"
#include "fpq/ops.hpp"

namespace fpq {

std::string Rng::state() const {
  std::ostringstream out;
  out << engine_;
  return out.str();
}

void Rng::set_state(const std::string& state) {
  std::istringstream in(state);
  in >> engine_;
  if (!in) throw Error("Rng: malformed generator state");
}

std::string to_string(PerturbTarget target) {
  switch (target) {
    case PerturbTarget::Off: return "off";
    case PerturbTarget::Features: return "features";
    case PerturbTarget::Weights: return "weights";
  }
  return "off";
}

PerturbTarget perturb_target_from_string(const std::string& name) {
  if (name == "off" || name == "none") return PerturbTarget::Off;
  if (name == "features" || name == "feature-perturb") return PerturbTarget::Features;
  if (name == "weights" || name == "weight-perturb") return PerturbTarget::Weights;
  throw ConfigError("unknown perturbation target '" + name + "' (expected off, features, weights)");
}

bool PerturbPolicy::in_scope(int layer) const {
  if (scope.empty()) return true;
  for (int l : scope) {
    if (l == layer) return true;
  }
  return false;
}

void PerturbPolicy::validate() const {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw ConfigError("perturbation probability p must lie in [0, 1], got " + std::to_string(p));
  }
}

Tensor sample_uniform_delta(const Shape& shape, float s, Rng& rng) {
  if (!(s > 0.0f)) throw Error("sample_uniform_delta: scale must be positive, got " + std::to_string(s));
  std::vector<float> values(static_cast<std::size_t>(shape_numel(shape)));
  const float half = 0.5f * s;
  for (auto& v : values) v = rng.uniform(-half, half);
  return Tensor::from(shape, std::move(values));
}

Perturbed maybe_perturb(const Tensor& x, float s, const PerturbPolicy& policy, Rng& rng, Mode mode,
                        int layer) {
  if (mode == Mode::Eval || policy.target != PerturbTarget::Features || !policy.in_scope(layer)) {
    return {x, false};
  }
  if (!rng.bernoulli(policy.p)) return {x, false};
  return {add(x, sample_uniform_delta(x.shape(), s, rng)), true};
}

Tensor apply_weight_noise(const Tensor& w, const std::vector<float>& scales, Rng& rng) {
  const std::int64_t channels = w.ndim() > 0 ? w.dim(0) : 1;
  if (scales.size() != 1 && static_cast<std::int64_t>(scales.size()) != channels) {
    throw ShapeError("apply_weight_noise: " + std::to_string(scales.size()) +
                     " scales for weight " + shape_str(w.shape()));
  }
  const std::int64_t per = w.numel() / channels;
  std::vector<float> delta(static_cast<std::size_t>(w.numel()), 0.0f);
  for (std::int64_t c = 0; c < channels; ++c) {
    const float s = scales.size() == 1 ? scales[0] : scales[static_cast<std::size_t>(c)];
    if (s < 0.0f) throw Error("apply_weight_noise: negative scale");
    if (s == 0.0f) continue;
    for (std::int64_t i = 0; i < per; ++i) {
      delta[static_cast<std::size_t>(c * per + i)] = rng.uniform(-0.5f * s, 0.5f * s);
    }
  }
  return add(w, Tensor::from(w.shape(), std::move(delta)));
}

namespace {

double mean_of(const Tensor& t) {
  double acc = 0.0;
  for (float v : t.data()) acc += v;
  return acc / static_cast<double>(t.numel());
}

}  // namespace

BiasReport estimate_accumulated_bias(const LayerChain& net, const Tensor& x,
                                     const PerturbPolicy& policy, int trials, Rng& rng) {
  if (trials < 100) throw Error("estimate_accumulated_bias: need at least 100 trials, got " + std::to_string(trials));
  if (net.layers.size() != net.input_scales.size() || net.layers.empty()) {
    throw Error("estimate_accumulated_bias: one input scale per layer is required");
  }
  policy.validate();
  NoGradGuard no_grad;
  const std::size_t depth = net.layers.size();

  std::vector<Tensor> clean;
  Tensor h = x;
  for (const auto& layer : net.layers) {
    h = layer(h);
    clean.push_back(h);
  }

  std::vector<double> sum(depth, 0.0), sum_sq(depth, 0.0);
  std::vector<std::vector<double>> vec_sum(depth);
  for (std::size_t l = 0; l < depth; ++l) vec_sum[l].assign(static_cast<std::size_t>(clean[l].numel()), 0.0);

  for (int t = 0; t < trials; ++t) {
    Tensor a = x;
    for (std::size_t l = 0; l < depth; ++l) {
      try {
        a = maybe_perturb(a, net.input_scales[l], policy, rng, Mode::Train, static_cast<int>(l)).value;
        a = net.layers[l](a);
      } catch (const NonFiniteError& e) {
        throw NonFiniteError("bias estimation aborted at trial " + std::to_string(t) + ", layer " +
                             std::to_string(l) + ": " + e.what());
      }
      Tensor diff = sub(a, clean[l]);
      const double m = mean_of(diff);
      sum[l] += m;
      sum_sq[l] += m * m;
      auto d = diff.data();
      for (std::size_t i = 0; i < d.size(); ++i) vec_sum[l][i] += d[i];
    }
  }

  BiasReport report;
  report.trials = trials;
  const double n = trials;
  for (std::size_t l = 0; l < depth; ++l) {
    const double mean = sum[l] / n;
    const double var = std::max(0.0, (sum_sq[l] - n * mean * mean) / (n - 1.0));
    double norm = 0.0;
    for (double v : vec_sum[l]) norm += (v / n) * (v / n);
    report.layer_bias.push_back(mean);
    report.layer_stderr.push_back(std::sqrt(var / n));
    report.layer_bias_norm.push_back(std::sqrt(norm));
  }
  report.output_bias = report.layer_bias.back();
  report.output_stderr = report.layer_stderr.back();
  report.significant = std::fabs(report.output_bias) > 3.0 * report.output_stderr;
  return report;
}

LayerChain square_fixture(float s) {
  LayerChain chain;
  chain.layers.push_back([](const Tensor& v) { return square(v); });
  chain.input_scales = {s};
  return chain;
}

LayerChain two_square_fixture(float s) {
  LayerChain chain;
  chain.layers.push_back([](const Tensor& v) { return square(v); });
  chain.layers.push_back([](const Tensor& v) { return square(v); });
  chain.input_scales = {s, s};
  return chain;
}

LayerChain linear_fixture(float s) {
  LayerChain chain;
  chain.layers.push_back([](const Tensor& v) { return add_scalar(scale(v, 1.7f), -0.3f); });
  chain.layers.push_back([](const Tensor& v) { return add_scalar(scale(v, -0.6f), 0.2f); });
  chain.input_scales = {s, s};
  return chain;
}

}  // namespace fpq
