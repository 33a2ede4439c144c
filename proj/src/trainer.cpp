#include "fpq/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>
#include <unordered_set>

#include "fpq/distillation.hpp"
#include "fpq/error.hpp"
#include "fpq/hash.hpp"
#include "fpq/ops.hpp"
#include "fpq/probes.hpp"
#include "fpq/quantizer.hpp"

namespace fpq {

namespace {

Dataset take_first(const Dataset& ds, std::int64_t n) {
  if (n <= 0 || n >= ds.size()) return ds;
  Dataset out = ds;
  Shape shape = ds.images.shape();
  const auto per = static_cast<std::size_t>(shape_numel(ds.sample_shape()));
  auto src = ds.images.data();
  shape[0] = n;
  out.images = Tensor::from(shape, std::vector<float>(src.begin(), src.begin() + n * per));
  out.labels.resize(static_cast<std::size_t>(n));
  return out;
}

PerturbPolicy make_policy(const TrainConfig& cfg, std::size_t conv_count) {
  PerturbPolicy policy;
  policy.p = cfg.p;
  policy.target = perturb_target_from_string(cfg.perturb);
  policy.seed = cfg.seed;
  if (!cfg.perturb_first_layer) {
    for (std::size_t i = 1; i < conv_count; ++i) policy.scope.push_back(static_cast<int>(i));
    // An empty scope means "all layers", so a single-conv model needs the
    // policy switched off instead.
    if (policy.scope.empty()) policy.target = PerturbTarget::Off;
  }
  policy.validate();
  return policy;
}

TotalLossOptions loss_options(const TrainConfig& cfg) {
  TotalLossOptions opts;
  opts.csd.reduction = cfg.csd_reduction == "sum" ? CsdReduction::Sum : CsdReduction::Mean;
  opts.csd_weight = cfg.csd ? static_cast<float>(cfg.csd_weight) : 0.0f;
  return opts;
}

double l2_norm(const std::vector<Tensor>& ts) {
  double acc = 0.0;
  for (const auto& t : ts) {
    for (float v : t.data()) acc += static_cast<double>(v) * v;
  }
  return std::sqrt(acc);
}

void emit(const MetricsSink& sink, const nlohmann::json& row) {
  if (sink) sink(row);
}

std::int64_t total_steps(std::int64_t batch_size, std::int64_t train_size, std::int64_t epochs) {
  return epochs * ((train_size + batch_size - 1) / batch_size);
}

double schedule(const TrainConfig& cfg, double lr0, std::int64_t t, std::int64_t total) {
  return cfg.scheduler == "constant" ? lr0 : cosine_lr(lr0, t, total);
}

nlohmann::json state_to_json(const RunState& s) {
  return {{"epoch", s.epoch},
          {"step", s.step},
          {"best_accuracy", s.best_accuracy},
          {"final_accuracy", s.final_accuracy},
          {"last_train_loss", s.last_train_loss},
          {"last_trace", s.last_trace},
          {"stability_variance", s.stability_variance},
          {"grad_norm_sum", s.grad_norm_sum},
          {"grad_norm_count", s.grad_norm_count},
          {"epoch_accuracy", s.epoch_accuracy},
          {"zero_point_hash", s.zero_point_hash},
          {"perturb_rng", s.perturb_rng},
          {"augment_rng", s.augment_rng}};
}

RunState state_from_json(const nlohmann::json& j) {
  RunState s;
  s.epoch = j.at("epoch").get<std::int64_t>();
  s.step = j.at("step").get<std::int64_t>();
  s.best_accuracy = j.at("best_accuracy").get<double>();
  s.final_accuracy = j.at("final_accuracy").get<double>();
  s.last_train_loss = j.at("last_train_loss").get<double>();
  s.last_trace = j.at("last_trace").get<double>();
  s.stability_variance = j.at("stability_variance").get<double>();
  s.grad_norm_sum = j.at("grad_norm_sum").get<double>();
  s.grad_norm_count = j.at("grad_norm_count").get<std::int64_t>();
  s.epoch_accuracy = j.at("epoch_accuracy").get<std::vector<double>>();
  s.zero_point_hash = j.at("zero_point_hash").get<std::string>();
  s.perturb_rng = j.at("perturb_rng").get<std::string>();
  s.augment_rng = j.at("augment_rng").get<std::string>();
  return s;
}

void write_checkpoint(const std::string& path, const LayeredModel& student, const Sgd& opt, const RunState& state,
                      const TrainConfig& cfg) {
  Checkpoint ckpt;
  save_model(ckpt, student);
  opt.save(ckpt);
  ckpt.put_string("state", state_to_json(state).dump());
  ckpt.put_string("config_hash", config_hash(cfg));
  ckpt.save(path);
}

std::string join(const std::string& dir, const std::string& file) {
  return (std::filesystem::path(dir) / file).string();
}

// Hutchinson trace of the CE loss on a fixed slice of the training set, so
// every run of an experiment probes the same images.
double trace_probe(const LayeredModel& student, const TrainConfig& cfg, const Dataset& train, std::int64_t epoch) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(std::min(cfg.trace_batch, train.size())));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int64_t>(i);
  Rng rng(derive_seed(cfg.seed, "trace") + static_cast<std::uint64_t>(epoch));
  return model_hessian_trace(student, gather(train, idx), static_cast<int>(cfg.trace_probes), rng).estimate.mean;
}

double stability(const LayeredModel& student, const TrainConfig& cfg, const Dataset& test) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(std::min(cfg.stability_samples, test.size())));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int64_t>(i);
  Batch b = gather(test, idx);
  double mean = 0.0, sq = 0.0;
  for (float v : b.images.data()) {
    mean += v;
    sq += static_cast<double>(v) * v;
  }
  const double n = static_cast<double>(b.images.numel());
  mean /= n;
  const double input_std = std::sqrt(std::max(0.0, sq / n - mean * mean));
  Rng rng(derive_seed(cfg.seed, "stability"));
  return stability_probe(student, b.images, cfg.stability_sigma * input_std, static_cast<int>(cfg.stability_trials),
                         rng)
      .variance;
}

[[noreturn]] void diverge(const std::string& why, const LayeredModel& student, const Sgd& opt, RunState state,
                          const TrainConfig& cfg, const TrainHooks& hooks) {
  std::string where;
  if (!hooks.checkpoint_dir.empty()) {
    where = join(hooks.checkpoint_dir, "diverged.ckpt");
    write_checkpoint(where, student, opt, state, cfg);
  }
  emit(hooks.metrics, {{"kind", "diverged"}, {"epoch", state.epoch}, {"step", state.step}, {"reason", why}});
  throw DivergenceError("training diverged at step " + std::to_string(state.step) + ": " + why +
                            (where.empty() ? "" : " (checkpoint " + where + ")"),
                        state.step);
}

RunState run_epochs(LayeredModel& student, const LayeredModel& teacher, const TrainConfig& cfg,
                    const ExperimentData& data, const TrainHooks& hooks, Sgd& opt, RunState state) {
  validate(cfg);
  if (!student.quantized() || !student.calibrated) throw Error("train: the student must be quantized and calibrated");
  const PerturbPolicy policy = make_policy(cfg, student.conv_count());
  const TotalLossOptions loss_opts = loss_options(cfg);
  const DatasetKind kind = dataset_from_string(cfg.dataset);
  const AugmentOptions augment = cfg.augment ? default_augmentation(kind) : AugmentOptions{};
  const bool augmenting = augment.horizontal_flip || augment.pad_crop > 0;
  const std::int64_t total = total_steps(cfg.batch_size, data.train.size(), cfg.epochs);

  Rng perturb_rng(derive_seed(cfg.seed, "perturb"));
  Rng augment_rng(derive_seed(cfg.seed, "augment"));
  if (!state.perturb_rng.empty()) perturb_rng.set_state(state.perturb_rng);
  if (!state.augment_rng.empty()) augment_rng.set_state(state.augment_rng);
  if (state.zero_point_hash.empty()) state.zero_point_hash = zero_point_digest(student);

  // Gradient norms are taken over the conv and linear weights only.
  std::unordered_set<const TensorImpl*> weight_set;
  for (const auto& w : student.weight_tensors()) weight_set.insert(w.impl());
  std::vector<Tensor> all_params;
  for (const auto& g : opt.groups()) all_params.insert(all_params.end(), g.params.begin(), g.params.end());

  const std::int64_t last_epoch =
      hooks.stop_after_epochs > 0 ? std::min(cfg.epochs, hooks.stop_after_epochs) : cfg.epochs;
  for (std::int64_t epoch = state.epoch; epoch < last_epoch; ++epoch) {
    const auto batches = batch_indices(data.train.size(), cfg.batch_size, derive_seed(cfg.seed, "batches"), epoch);
    double loss_sum = 0.0;
    for (const auto& idx : batches) {
      const double lr = schedule(cfg, cfg.lr, state.step, total);
      Batch b = augmenting ? gather_augmented(data.train, idx, augment, augment_rng) : gather(data.train, idx);
      LossBreakdown loss;
      std::vector<Tensor> grads;
      int perturbed = 0;
      try {
        std::vector<Tensor> t_taps;
        if (cfg.csd) {
          NoGradGuard no_grad;
          t_taps = forward_with_taps(teacher, b.images).taps;
        }
        EnableGradGuard enable;
        ForwardResult out = forward_with_taps(student, b.images, {Mode::Train, &policy, &perturb_rng, cfg.csd});
        for (bool p : out.perturbed) perturbed += p ? 1 : 0;
        std::vector<LayerTap> taps;
        for (std::size_t i = 0; i < t_taps.size(); ++i) taps.push_back({static_cast<int>(i), out.taps[i], t_taps[i]});
        loss = total_loss(out.logits, b.labels, taps, loss_opts);
        if (!std::isfinite(loss.total)) diverge("loss is non-finite", student, opt, state, cfg, hooks);
        if (loss.total > cfg.divergence_threshold) {
          std::ostringstream why;
          why << "loss " << loss.total << " exceeds the threshold " << cfg.divergence_threshold;
          diverge(why.str(), student, opt, state, cfg, hooks);
        }
        grads = grad(loss.loss, all_params);
      } catch (const NonFiniteError& e) {
        diverge(e.what(), student, opt, state, cfg, hooks);
      }

      std::vector<std::vector<Tensor>> grouped;
      std::vector<Tensor> weight_grads;
      std::size_t k = 0;
      for (const auto& g : opt.groups()) {
        grouped.emplace_back(grads.begin() + static_cast<std::ptrdiff_t>(k),
                             grads.begin() + static_cast<std::ptrdiff_t>(k + g.params.size()));
        for (std::size_t i = 0; i < g.params.size(); ++i) {
          if (weight_set.count(g.params[i].impl())) weight_grads.push_back(grads[k + i]);
        }
        k += g.params.size();
      }

      nlohmann::json row = {{"kind", "step"},          {"epoch", epoch},     {"step", state.step},
                            {"lr", lr},                {"ce", loss.ce},      {"csd", loss.csd},
                            {"total", loss.total},     {"perturbed", perturbed}};
      if (cfg.gradnorm_every_steps > 0 && state.step % cfg.gradnorm_every_steps == 0) {
        const double norm = l2_norm(weight_grads);
        state.grad_norm_sum += norm;
        ++state.grad_norm_count;
        row["grad_norm"] = norm;
      }
      emit(hooks.metrics, row);

      opt.step(grouped, lr);
      loss_sum += loss.total;
      ++state.step;
    }

    state.epoch = epoch + 1;
    state.last_train_loss = loss_sum / static_cast<double>(batches.size());
    state.final_accuracy = evaluate(student, data.test);
    state.best_accuracy = std::max(state.best_accuracy, state.final_accuracy);
    state.epoch_accuracy.push_back(state.final_accuracy);
    const std::string zp = zero_point_digest(student);
    if (zp != state.zero_point_hash) {
      throw Error("zero-points changed during training (epoch " + std::to_string(epoch) + ")");
    }
    nlohmann::json row = {{"kind", "epoch"},
                          {"epoch", epoch},
                          {"step", state.step},
                          {"train_loss", state.last_train_loss},
                          {"test_accuracy", state.final_accuracy},
                          {"zero_point_hash", zp}};
    if (cfg.trace_every_epochs > 0 && state.epoch % cfg.trace_every_epochs == 0) {
      state.last_trace = trace_probe(student, cfg, data.train, epoch);
      row["trace"] = state.last_trace;
    }
    emit(hooks.metrics, row);

    state.perturb_rng = perturb_rng.state();
    state.augment_rng = augment_rng.state();
    if (!hooks.checkpoint_dir.empty()) write_checkpoint(join(hooks.checkpoint_dir, "last.ckpt"), student, opt, state, cfg);
  }

  if (state.epoch == cfg.epochs) {
    if (cfg.stability_at_end) state.stability_variance = stability(student, cfg, data.test);
    emit(hooks.metrics, {{"kind", "final"},
                         {"epoch", cfg.epochs},
                         {"step", state.step},
                         {"test_accuracy", state.final_accuracy},
                         {"best_accuracy", state.best_accuracy},
                         {"trace", state.last_trace},
                         {"stability_variance", state.stability_variance}});
  }
  return state;
}

std::string fixed(double v, int precision = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

}  // namespace

ExperimentData load_experiment_data(const TrainConfig& cfg) {
  const DatasetKind kind = dataset_from_string(cfg.dataset);
  const std::string root = resolve_data_root(cfg.data_root);
  LoadOptions opts;
  opts.cifar_train_subset = cfg.cifar_train_subset;
  ExperimentData data{load(kind, root, Split::Train, opts), load(kind, root, Split::Test, opts)};
  data.train = take_first(data.train, cfg.train_subset);
  return data;
}

ModelConfig model_config(const TrainConfig& cfg, const Dataset& data, bool quantized) {
  ModelConfig mc;
  mc.arch = arch_from_string(cfg.arch);
  mc.in_channels = data.sample_shape()[0];
  mc.num_classes = data.num_classes;
  mc.width = cfg.width;
  mc.quantized = quantized;
  mc.weight_bits = cfg.wbits;
  mc.activation_bits = cfg.abits;
  mc.keep_edges_8bit = cfg.keep_edges_8bit;
  mc.seed = derive_seed(cfg.seed, "init");
  return mc;
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string& tag) {
  std::vector<std::uint32_t> words = {static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  for (unsigned char c : tag) words.push_back(c);
  std::seed_seq seq(words.begin(), words.end());
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

double cosine_lr(double lr0, std::int64_t t, std::int64_t total) {
  if (total <= 0) return lr0;
  const double frac = static_cast<double>(std::clamp<std::int64_t>(t, 0, total)) / static_cast<double>(total);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

std::vector<ParamGroup> parameter_groups(const LayeredModel& model, double weight_decay) {
  std::vector<ParamGroup> groups;
  groups.push_back({"weights", model.weight_parameters(), weight_decay, false});
  auto scales = model.scale_parameters();
  if (!scales.empty()) groups.push_back({"scales", std::move(scales), 0.0, true});
  return groups;
}

Sgd::Sgd(std::vector<ParamGroup> groups, double momentum) : groups_(std::move(groups)), momentum_(momentum) {
  for (const auto& g : groups_) {
    buffers_.emplace_back();
    for (const auto& p : g.params) buffers_.back().emplace_back(static_cast<std::size_t>(p.numel()), 0.0f);
  }
}

void Sgd::step(const std::vector<std::vector<Tensor>>& grads, double lr) {
  if (grads.size() != groups_.size()) throw Error("Sgd::step: one gradient list per parameter group is required");
  const float m = static_cast<float>(momentum_);
  const float rate = static_cast<float>(lr);
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    auto& group = groups_[gi];
    const float wd = static_cast<float>(group.weight_decay);
    for (std::size_t i = 0; i < group.params.size(); ++i) {
      Tensor p = group.params[i];
      auto g = grads[gi][i].data();
      auto w = p.mutable_data();
      auto& buf = buffers_[gi][i];
      if (g.size() != w.size()) throw ShapeError("Sgd::step: gradient size does not match parameter");
      for (std::size_t k = 0; k < w.size(); ++k) {
        buf[k] = m * buf[k] + (g[k] + wd * w[k]);
        w[k] -= rate * buf[k];
      }
      if (group.scales) {
        for (auto& s : w) s = std::max(s, kMinScale);
      }
    }
  }
}

void Sgd::save(Checkpoint& ckpt, const std::string& prefix) const {
  for (std::size_t g = 0; g < buffers_.size(); ++g) {
    for (std::size_t i = 0; i < buffers_[g].size(); ++i) {
      const auto& buf = buffers_[g][i];
      ckpt.put_floats(prefix + groups_[g].name + "." + std::to_string(i),
                      {static_cast<std::int64_t>(buf.size())}, buf);
    }
  }
}

void Sgd::load(const Checkpoint& ckpt, const std::string& prefix) {
  for (std::size_t g = 0; g < buffers_.size(); ++g) {
    for (std::size_t i = 0; i < buffers_[g].size(); ++i) {
      Tensor t = ckpt.tensor(prefix + groups_[g].name + "." + std::to_string(i));
      if (static_cast<std::size_t>(t.numel()) != buffers_[g][i].size()) {
        throw Error("checkpoint momentum buffer '" + groups_[g].name + "." + std::to_string(i) +
                    "' does not match the model");
      }
      auto v = t.data();
      std::copy(v.begin(), v.end(), buffers_[g][i].begin());
    }
  }
}

double evaluate(const LayeredModel& model, const Dataset& data, std::int64_t batch_size) {
  if (data.size() == 0) return 0.0;
  NoGradGuard no_grad;
  std::int64_t correct = 0;
  for (std::int64_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::int64_t> idx;
    for (std::int64_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    Batch b = gather(data, idx);
    Tensor logits = forward(model, b.images);
    const std::int64_t classes = logits.dim(1);
    auto v = logits.data();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const float* row = v.data() + r * static_cast<std::size_t>(classes);
      const auto best = std::max_element(row, row + classes) - row;
      if (best == b.labels[r]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

std::string zero_point_digest(const LayeredModel& model) {
  std::vector<std::span<const std::uint8_t>> parts;
  auto add = [&](const QuantSpec& q) {
    parts.emplace_back(reinterpret_cast<const std::uint8_t*>(q.zero_point.data()),
                       q.zero_point.size() * sizeof(std::int32_t));
  };
  for (const auto& c : model.convs) {
    add(c.weight_q);
    add(c.activation_q);
  }
  add(model.fc.weight_q);
  add(model.fc.activation_q);
  return sha256_hex(parts);
}

Teacher prepare_teacher(const TrainConfig& cfg, const ExperimentData& data, const MetricsSink& metrics) {
  validate(cfg);
  Teacher out;
  const ModelConfig mc = model_config(cfg, data.train, false);
  if (!cfg.teacher_checkpoint.empty() && std::filesystem::exists(cfg.teacher_checkpoint)) {
    out.model = load_model(Checkpoint::load(cfg.teacher_checkpoint), "teacher.");
    const ModelConfig& got = out.model.config;
    if (got.arch != mc.arch || got.width != mc.width || got.in_channels != mc.in_channels ||
        got.num_classes != mc.num_classes || got.quantized) {
      throw ConfigError("teacher checkpoint '" + cfg.teacher_checkpoint + "' does not match model." +
                        " Expected a full-precision " + to_string(mc.arch) + " of width " +
                        std::to_string(mc.width));
    }
    out.loaded = true;
    out.test_accuracy = evaluate(out.model, data.test);
    emit(metrics, {{"kind", "teacher"}, {"epoch", -1}, {"loaded", true}, {"test_accuracy", out.test_accuracy}});
    return out;
  }

  out.model = build(mc);
  Sgd opt(parameter_groups(out.model, cfg.weight_decay), cfg.momentum);
  const DatasetKind kind = dataset_from_string(cfg.dataset);
  const AugmentOptions augment = cfg.augment ? default_augmentation(kind) : AugmentOptions{};
  const bool augmenting = augment.horizontal_flip || augment.pad_crop > 0;
  Rng augment_rng(derive_seed(cfg.seed, "teacher-augment"));
  const std::int64_t total = total_steps(cfg.teacher_batch_size, data.train.size(), cfg.teacher_epochs);
  std::int64_t step = 0;
  for (std::int64_t epoch = 0; epoch < cfg.teacher_epochs; ++epoch) {
    const auto batches =
        batch_indices(data.train.size(), cfg.teacher_batch_size, derive_seed(cfg.seed, "teacher-batches"), epoch);
    double loss_sum = 0.0;
    for (const auto& idx : batches) {
      Batch b = augmenting ? gather_augmented(data.train, idx, augment, augment_rng) : gather(data.train, idx);
      EnableGradGuard enable;
      Tensor loss = softmax_cross_entropy(forward(out.model, b.images), b.labels);
      const double value = loss.item();
      if (!std::isfinite(value) || value > cfg.divergence_threshold) {
        throw DivergenceError("teacher training diverged at step " + std::to_string(step), step);
      }
      opt.step({grad(loss, opt.groups()[0].params)}, schedule(cfg, cfg.teacher_lr, step, total));
      loss_sum += value;
      ++step;
    }
    out.test_accuracy = evaluate(out.model, data.test);
    emit(metrics, {{"kind", "teacher"},
                   {"epoch", -1},
                   {"teacher_epoch", epoch},
                   {"train_loss", loss_sum / static_cast<double>(batches.size())},
                   {"test_accuracy", out.test_accuracy}});
  }
  if (cfg.teacher_epochs == 0) out.test_accuracy = evaluate(out.model, data.test);
  if (!cfg.teacher_checkpoint.empty()) {
    const auto parent = std::filesystem::path(cfg.teacher_checkpoint).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    Checkpoint ckpt;
    save_model(ckpt, out.model, "teacher.");
    ckpt.save(cfg.teacher_checkpoint);
  }
  return out;
}

LayeredModel make_student(const TrainConfig& cfg, const ExperimentData& data, const LayeredModel& teacher,
                          std::vector<std::string>* warnings) {
  validate(cfg);
  LayeredModel student = build(model_config(cfg, data.train, true));
  copy_weights(teacher, student);
  const CalibrationSet calib = select_calibration(data.train, cfg.calib_size, derive_seed(cfg.seed, "calibration"));
  const QuantMode mode = cfg.quant_mode == "symmetric" ? QuantMode::Symmetric : QuantMode::Asymmetric;
  const ZeroPointInit zp = cfg.zero_point_init == "from-min" ? ZeroPointInit::FromMin : ZeroPointInit::MaxOnly;
  auto w = calibrate_model(student, calib.images, mode, zp);
  if (warnings) *warnings = std::move(w);
  return student;
}

RunState train(LayeredModel& student, const LayeredModel& teacher, const TrainConfig& cfg,
               const ExperimentData& data, const TrainHooks& hooks) {
  Sgd opt(parameter_groups(student, cfg.weight_decay), cfg.momentum);
  return run_epochs(student, teacher, cfg, data, hooks, opt, RunState{});
}

RunState resume(const Checkpoint& ckpt, LayeredModel& student, const LayeredModel& teacher, const TrainConfig& cfg,
                const ExperimentData& data, const TrainHooks& hooks) {
  if (ckpt.str("config_hash") != config_hash(cfg)) {
    throw ConfigError("checkpoint was written by a different configuration; resume needs the original manifest");
  }
  student = load_model(ckpt);
  Sgd opt(parameter_groups(student, cfg.weight_decay), cfg.momentum);
  opt.load(ckpt);
  RunState state = state_from_json(nlohmann::json::parse(ckpt.str("state")));
  if (zero_point_digest(student) != state.zero_point_hash) throw Error("checkpoint zero-points do not match its state");
  return run_epochs(student, teacher, cfg, data, hooks, opt, std::move(state));
}

std::string summary_csv_header() {
  return "label,status,arch,dataset,wbits,abits,perturb,p,csd,csd_weight,seed,epochs,steps,teacher_accuracy,"
         "test_accuracy,best_accuracy,train_loss,trace,stability_variance,mean_grad_norm";
}

std::string summary_csv_line(const SummaryRow& row) {
  const TrainConfig& c = row.config;
  const RunState& s = row.state;
  const double grad_norm = s.grad_norm_count > 0 ? s.grad_norm_sum / static_cast<double>(s.grad_norm_count) : 0.0;
  std::ostringstream out;
  out << row.label << ',' << row.status << ',' << c.arch << ',' << c.dataset << ',' << c.wbits << ',' << c.abits
      << ',' << c.perturb << ',' << fixed(c.p, 3) << ',' << (c.csd ? "on" : "off") << ',' << fixed(c.csd_weight, 3)
      << ',' << c.seed << ',' << c.epochs << ',' << s.step << ',' << fixed(row.teacher_accuracy) << ','
      << fixed(s.final_accuracy) << ',' << fixed(s.best_accuracy) << ',' << fixed(s.last_train_loss) << ','
      << fixed(s.last_trace) << ',' << fixed(s.stability_variance, 9) << ',' << fixed(grad_norm);
  return out.str();
}

std::vector<AblationCell> perturb_csd_grid() {
  return {
      {"baseline", {{"fpq.perturb", "off"}, {"fpq.csd", "false"}}},
      {"perturb-only", {{"fpq.perturb", "features"}, {"fpq.csd", "false"}}},
      {"csd-only", {{"fpq.perturb", "off"}, {"fpq.csd", "true"}}},
      {"perturb+csd", {{"fpq.perturb", "features"}, {"fpq.csd", "true"}}},
  };
}

std::vector<AblationCell> p_sweep_grid(std::vector<double> ps) {
  std::sort(ps.begin(), ps.end());
  std::vector<AblationCell> cells;
  for (double p : ps) {
    std::ostringstream value;
    value << p;
    cells.push_back({"p=" + fixed(p, 2), {{"fpq.p", value.str()}, {"fpq.perturb", "features"}, {"fpq.csd", "true"}}});
  }
  return cells;
}

std::vector<AblationCell> parse_grid(const std::string& spec) {
  if (spec.empty()) return {};
  if (spec == "perturb-csd") return perturb_csd_grid();
  const std::string prefix = "p-sweep:";
  if (spec.rfind(prefix, 0) == 0) {
    std::vector<double> ps;
    std::stringstream list(spec.substr(prefix.size()));
    std::string item;
    while (std::getline(list, item, ',')) {
      TrainConfig probe;
      set_config_value(probe, "fpq.p", item);
      ps.push_back(probe.p);
    }
    return p_sweep_grid(std::move(ps));
  }
  throw ConfigError("unknown ablation grid '" + spec + "' (expected perturb-csd or p-sweep:<p1>,<p2>,...)");
}

std::vector<SummaryRow> ablate(const TrainConfig& base, const std::vector<AblationCell>& grid,
                               const ExperimentData& data, const Teacher& teacher, const AblationHooks& hooks) {
  std::vector<SummaryRow> rows;
  for (const auto& cell : grid) {
    SummaryRow row;
    row.label = cell.label;
    row.config = base;
    row.teacher_accuracy = teacher.test_accuracy;
    try {
      for (const auto& [key, value] : cell.overrides) set_config_value(row.config, key, value);
      validate(row.config);
      TrainHooks th;
      if (hooks.metrics) th.metrics = hooks.metrics(cell);
      if (hooks.checkpoint_dir) th.checkpoint_dir = hooks.checkpoint_dir(cell);
      LayeredModel student = make_student(row.config, data, teacher.model);
      row.state = train(student, teacher.model, row.config, data, th);
    } catch (const std::exception& e) {
      row.status = "FAILED";
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string render_ablation_table(const std::vector<SummaryRow>& rows) {
  std::vector<std::vector<std::string>> cells = {
      {"cell", "perturb", "p", "csd", "test acc %", "best acc %", "trace", "status"}};
  for (const auto& r : rows) {
    const bool ok = r.status == "OK";
    cells.push_back({r.label, r.config.perturb, fixed(r.config.p, 2), r.config.csd ? "on" : "off",
                     ok ? fixed(100.0 * r.state.final_accuracy, 2) : "-",
                     ok ? fixed(100.0 * r.state.best_accuracy, 2) : "-", ok ? fixed(r.state.last_trace, 4) : "-",
                     r.status});
  }
  std::vector<std::size_t> width(cells[0].size(), 0);
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  }
  std::ostringstream out;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t i = 0; i < cells[r].size(); ++i) {
      if (i) out << "  ";
      if (i + 1 == cells[r].size()) {
        out << cells[r][i];
      } else {
        out << std::left << std::setw(static_cast<int>(width[i])) << cells[r][i];
      }
    }
    out << '\n';
    if (r == 0) {
      std::size_t line = 0;
      for (auto w : width) line += w;
      out << std::string(line + 2 * (width.size() - 1), '-') << '\n';
    }
  }
  return out.str();
}

}  // namespace fpq
