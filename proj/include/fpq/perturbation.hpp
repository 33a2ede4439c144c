#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "fpq/tensor.hpp"

namespace fpq {

// Seeded generator shared by every stochastic component of a run. The state
// round-trips through text so checkpoints can resume a stream exactly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double uniform01() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  float uniform(float lo, float hi) { return std::uniform_real_distribution<float>(lo, hi)(engine_); }
  bool bernoulli(double p) { return uniform01() < p; }
  float normal(float mean, float stddev) { return std::normal_distribution<float>(mean, stddev)(engine_); }
  std::uint64_t next_u64() { return engine_(); }
  std::mt19937_64& engine() { return engine_; }

  std::string state() const;
  void set_state(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

enum class PerturbTarget { Off, Features, Weights };
enum class Mode { Train, Eval };

std::string to_string(PerturbTarget target);
PerturbTarget perturb_target_from_string(const std::string& name);

struct PerturbPolicy {
  double p = 0.0;
  PerturbTarget target = PerturbTarget::Off;
  std::uint64_t seed = 0;
  // Layer indices eligible for perturbation; empty means every layer.
  std::vector<int> scope;

  bool in_scope(int layer) const;
  void validate() const;
};

// Entries i.i.d. from U[-s/2, s/2]. Throws if s <= 0.
Tensor sample_uniform_delta(const Shape& shape, float s, Rng& rng);

struct Perturbed {
  Tensor value;
  bool applied = false;
};

// One Bernoulli(p) coin per call; on heads returns x + delta with delta from
// sample_uniform_delta(x.shape(), s, rng), otherwise x itself. Inert (no RNG
// draws) in Eval mode, when the target is not Features, or when `layer` is out
// of scope. The coin is drawn before the noise and tails skip the noise draw.
Perturbed maybe_perturb(const Tensor& x, float s, const PerturbPolicy& policy, Rng& rng,
                        Mode mode, int layer = 0);

// w + delta with delta_i ~ U[-s_c/2, s_c/2], c the output channel of element i
// (axis 0). `scales` holds one entry per channel or a single shared entry; a
// zero entry adds no noise. Gradients flow to w.
Tensor apply_weight_noise(const Tensor& w, const std::vector<float>& scales, Rng& rng);

// A composition phi_N o ... o phi_1 with the perturbation amplitude s_l for the
// input of each layer. Used to measure the accumulated bias of injected noise.
struct LayerChain {
  std::vector<std::function<Tensor(const Tensor&)>> layers;
  std::vector<float> input_scales;
};

struct BiasReport {
  int trials = 0;
  // Per layer: mean over trials of the mean output displacement, its standard
  // error, and the norm of the mean displacement vector.
  std::vector<double> layer_bias;
  std::vector<double> layer_stderr;
  std::vector<double> layer_bias_norm;
  double output_bias = 0.0;
  double output_stderr = 0.0;
  // |output_bias| > 3 * output_stderr
  bool significant = false;
};

// Monte-Carlo estimate of E[f(x; perturbed) - f(x)] per layer and at the
// output. Requires trials >= 100. Non-finite activations abort with a
// NonFiniteError naming the trial and layer.
BiasReport estimate_accumulated_bias(const LayerChain& net, const Tensor& x,
                                     const PerturbPolicy& policy, int trials, Rng& rng);

// Fixtures with known bias used by tests, the CLI and the Python bindings.
// square: x -> x^2 (one layer). two_square: x -> (x^2)^2 with noise before both
// layers. linear: two affine maps.
LayerChain square_fixture(float s);
LayerChain two_square_fixture(float s);
LayerChain linear_fixture(float s);

}  // namespace fpq
