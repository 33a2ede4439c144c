#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fpq/checkpoint.hpp"
#include "fpq/config.hpp"
#include "fpq/data.hpp"
#include "fpq/model.hpp"
#include "fpq/tensor.hpp"
#include "json.hpp"

namespace fpq {

// Receives one JSON object per training step, probe and epoch, in order.
using MetricsSink = std::function<void(const nlohmann::json&)>;

struct ExperimentData {
  Dataset train;
  Dataset test;
};

// Loads both splits named by the config, keeping the first train_subset
// training records when that is set.
ExperimentData load_experiment_data(const TrainConfig& cfg);

ModelConfig model_config(const TrainConfig& cfg, const Dataset& data, bool quantized);

// Independent stream seeds derived from the run seed and a purpose tag.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& tag);

// lr0 * (1 + cos(pi t / T)) / 2, clamped to T at the end.
double cosine_lr(double lr0, std::int64_t t, std::int64_t total);

struct ParamGroup {
  std::string name;
  std::vector<Tensor> params;
  double weight_decay = 0.0;
  // Scales are clamped to kMinScale after each update.
  bool scales = false;
};

// "weights" (conv/linear weights, affines, bias) with weight decay and
// "scales" (learnable quantizer steps) without.
std::vector<ParamGroup> parameter_groups(const LayeredModel& model, double weight_decay);

// SGD with heavy-ball momentum: buf = momentum * buf + (g + wd * w); w -= lr * buf.
class Sgd {
 public:
  Sgd(std::vector<ParamGroup> groups, double momentum);

  const std::vector<ParamGroup>& groups() const { return groups_; }
  // grads[g][i] matches groups()[g].params[i].
  void step(const std::vector<std::vector<Tensor>>& grads, double lr);

  void save(Checkpoint& ckpt, const std::string& prefix = "optim.") const;
  void load(const Checkpoint& ckpt, const std::string& prefix = "optim.");

 private:
  std::vector<ParamGroup> groups_;
  double momentum_;
  std::vector<std::vector<std::vector<float>>> buffers_;
};

// Top-1 accuracy in eval mode (no perturbation), ties broken toward the
// lower class index.
double evaluate(const LayeredModel& model, const Dataset& data, std::int64_t batch_size = 500);

// SHA-256 over every zero-point buffer of the model, in layer order.
std::string zero_point_digest(const LayeredModel& model);

struct RunState {
  std::int64_t epoch = 0;  // completed epochs
  std::int64_t step = 0;   // completed optimizer steps
  double best_accuracy = 0.0;
  double final_accuracy = 0.0;
  double last_train_loss = 0.0;
  double last_trace = 0.0;  // most recent Hutchinson trace, 0 when never probed
  double stability_variance = 0.0;
  double grad_norm_sum = 0.0;  // over the recorded gradient-norm probes
  std::int64_t grad_norm_count = 0;
  std::vector<double> epoch_accuracy;
  std::string zero_point_hash;
  std::string perturb_rng;
  std::string augment_rng;
};

struct TrainHooks {
  MetricsSink metrics;
  // Epoch checkpoints (last.ckpt) and the divergence checkpoint go here.
  std::string checkpoint_dir;
  // Stop after this many completed epochs (0 runs to the end); used to
  // simulate an interrupted run.
  std::int64_t stop_after_epochs = 0;
};

// Full-precision teacher trained with cross-entropy only, or loaded from
// cfg.teacher_checkpoint when that file exists (and written there otherwise).
struct Teacher {
  LayeredModel model;
  double test_accuracy = 0.0;
  bool loaded = false;
};
Teacher prepare_teacher(const TrainConfig& cfg, const ExperimentData& data, const MetricsSink& metrics = {});

// Student with the teacher's weights, quantizers calibrated on calib_size
// training images. Returns calibration warnings through `warnings`.
LayeredModel make_student(const TrainConfig& cfg, const ExperimentData& data, const LayeredModel& teacher,
                          std::vector<std::string>* warnings = nullptr);

// Fine-tunes a calibrated student against the frozen teacher: per step the
// teacher and student run with taps, the student under the perturbation
// policy, on CE + csd_weight * CSD; SGD with momentum on weights and scales
// under the cosine schedule. A loss above the divergence threshold or a
// non-finite value writes diverged.ckpt and throws DivergenceError.
RunState train(LayeredModel& student, const LayeredModel& teacher, const TrainConfig& cfg,
               const ExperimentData& data, const TrainHooks& hooks = {});

// Continues a run from an epoch checkpoint written by train(). `student` is
// replaced by the checkpointed model.
RunState resume(const Checkpoint& ckpt, LayeredModel& student, const LayeredModel& teacher, const TrainConfig& cfg,
                const ExperimentData& data, const TrainHooks& hooks = {});

// Summary of one finished run; every number is printed with fixed precision.
struct SummaryRow {
  std::string label;
  TrainConfig config;
  std::string status = "OK";  // or FAILED
  std::string error;
  double teacher_accuracy = 0.0;
  RunState state;
};
std::string summary_csv_header();
std::string summary_csv_line(const SummaryRow& row);

// One ablation cell: a label and config overrides applied on top of the base.
struct AblationCell {
  std::string label;
  std::vector<std::pair<std::string, std::string>> overrides;
};
// baseline, perturb-only, csd-only, perturb+csd.
std::vector<AblationCell> perturb_csd_grid();
// One cell per p (sorted ascending), perturbation and CSD on.
std::vector<AblationCell> p_sweep_grid(std::vector<double> ps);
// Parses "perturb-csd" or "p-sweep:0,0.1,0.5,1".
std::vector<AblationCell> parse_grid(const std::string& spec);

struct AblationHooks {
  // Per cell: where its metrics go, and its checkpoint directory.
  std::function<MetricsSink(const AblationCell&)> metrics;
  std::function<std::string(const AblationCell&)> checkpoint_dir;
};

// One training run per cell with the shared seed, data and teacher. A cell
// that throws is recorded as FAILED and the remaining cells still run.
std::vector<SummaryRow> ablate(const TrainConfig& base, const std::vector<AblationCell>& grid,
                               const ExperimentData& data, const Teacher& teacher, const AblationHooks& hooks = {});

std::string render_ablation_table(const std::vector<SummaryRow>& rows);

}  // namespace fpq
