// fpq: train / eval / probe / ablate front end.
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fpq/checkpoint.hpp"
#include "fpq/config.hpp"
#include "fpq/error.hpp"
#include "fpq/perturbation.hpp"
#include "fpq/probes.hpp"
#include "fpq/trainer.hpp"
#include "json.hpp"

#ifndef FPQ_VERSION
#define FPQ_VERSION "dev"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kDiverged = 3 };

// Data problems get their own exit code, so loading is wrapped.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fpq::ExperimentData load_data(const fpq::TrainConfig& cfg) {
  try {
    return fpq::load_experiment_data(cfg);
  } catch (const fpq::ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw DataError(e.what());
  }
}

std::string utc_now(const char* format) {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[64];
  std::strftime(buf, sizeof buf, format, &tm);
  return buf;
}

std::string fixed(double v, int precision = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw fpq::Error("cannot write " + path.string());
  out << text;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw fpq::ConfigError("cannot read " + path.string());
  return json::parse(in);
}

// Timestamp plus config hash; a numeric suffix avoids clobbering a run
// started within the same second.
fs::path fresh_run_dir(const fpq::TrainConfig& cfg, const std::string& prefix) {
  const std::string base = prefix + utc_now("%Y%m%dT%H%M%SZ") + "-" + fpq::config_hash(cfg).substr(0, 12);
  fs::path dir = fs::path(cfg.out_dir) / base;
  for (int k = 2; fs::exists(dir); ++k) dir = fs::path(cfg.out_dir) / (base + "-" + std::to_string(k));
  fs::create_directories(dir);
  return dir;
}

json dataset_record(const fpq::ExperimentData& data) {
  return {{"name", data.train.name},
          {"train_size", data.train.size()},
          {"test_size", data.test.size()},
          {"train_sha256", data.train.source_hash},
          {"test_sha256", data.test.source_hash},
          {"normalization", {{"mean", data.train.normalization.mean}, {"std", data.train.normalization.stddev}}}};
}

json manifest_for(const fpq::TrainConfig& cfg, const fpq::ExperimentData& data, const std::string& command) {
  json config = json::object();
  for (const auto& [key, value] : fpq::config_entries(cfg)) config[key] = value;
  return {{"command", command},
          {"code_version", FPQ_VERSION},
          {"config", config},
          {"config_hash", fpq::config_hash(cfg)},
          {"seed", cfg.seed},
          {"dataset", dataset_record(data)},
          {"start_time", utc_now("%Y-%m-%dT%H:%M:%SZ")},
          {"end_time", nullptr},
          {"status", "running"}};
}

void apply_manifest(fpq::TrainConfig& cfg, const fs::path& path) {
  const json m = read_json(path);
  for (const auto& [key, value] : m.at("config").items()) fpq::set_config_value(cfg, key, value.get<std::string>());
}

class MetricsFile {
 public:
  MetricsFile(const fs::path& path, bool append) : out_(path, append ? std::ios::app : std::ios::trunc) {
    if (!out_) throw fpq::Error("cannot write " + path.string());
  }
  fpq::MetricsSink sink() {
    return [this](const json& row) {
      out_ << row.dump() << '\n';
      out_.flush();
    };
  }

 private:
  std::ofstream out_;
};

// Keeps the metrics rows written before `epoch` (teacher rows included) so a
// resumed run appends exactly the rows the interrupted run had not reached.
void truncate_metrics(const fs::path& path, std::int64_t epoch) {
  std::ifstream in(path);
  std::vector<std::string> kept;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json row = json::parse(line);
    if (row.value("epoch", std::int64_t{-1}) < epoch) kept.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : kept) out << l << '\n';
}

// Registers `--<key>` for every config key plus --config and --set.
struct ConfigOptions {
  std::string config_file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "config file ([section] key = value)");
    app->add_option("--set", sets, "override as key=value (repeatable)");
    for (const auto& key : fpq::config_keys()) {
      app->add_option("--" + key.name, flags[key.qualified()], key.help + " [" + key.type + "]");
    }
  }

  // flags > --set > file > base.
  fpq::TrainConfig resolve(CLI::App* app, fpq::TrainConfig cfg) const {
    if (!config_file.empty()) fpq::apply_config_file(cfg, config_file);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw fpq::ConfigError("--set expects key=value, got '" + s + "'");
      fpq::set_config_value(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    for (const auto& key : fpq::config_keys()) {
      if (app->count("--" + key.name) > 0) fpq::set_config_value(cfg, key.qualified(), flags.at(key.qualified()));
    }
    fpq::validate(cfg);
    return cfg;
  }
};

fpq::Teacher teacher_for_run(fpq::TrainConfig cfg, const fpq::ExperimentData& data, const fs::path& dir,
                             const fpq::MetricsSink& sink) {
  // Without an explicit teacher checkpoint the run keeps its own copy.
  if (cfg.teacher_checkpoint.empty()) cfg.teacher_checkpoint = (dir / "teacher.ckpt").string();
  return fpq::prepare_teacher(cfg, data, sink);
}

void finish_run(const fs::path& dir, json manifest, const fpq::SummaryRow& row) {
  write_text(dir / "summary.csv", fpq::summary_csv_header() + "\n" + fpq::summary_csv_line(row) + "\n");
  manifest["end_time"] = utc_now("%Y-%m-%dT%H:%M:%SZ");
  manifest["status"] = row.status == "OK" ? "completed" : "failed";
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

void print_result(const fs::path& dir, const fpq::SummaryRow& row) {
  std::cout << "run directory: " << dir.string() << "\n"
            << "teacher accuracy: " << fixed(row.teacher_accuracy, 4) << "\n"
            << "test accuracy:    " << fixed(row.state.final_accuracy, 4) << "\n"
            << "best accuracy:    " << fixed(row.state.best_accuracy, 4) << "\n";
}

int cmd_train(CLI::App* app, const ConfigOptions& opts, const std::string& from_manifest, const std::string& resume_dir,
              std::int64_t stop_after) {
  if (!resume_dir.empty()) {
    const fs::path dir = resume_dir;
    fpq::TrainConfig cfg;
    apply_manifest(cfg, dir / "manifest.json");
    json manifest = read_json(dir / "manifest.json");
    const auto data = load_data(cfg);
    const fpq::Checkpoint ckpt = fpq::Checkpoint::load((dir / "last.ckpt").string());
    const auto state = json::parse(ckpt.str("state"));
    truncate_metrics(dir / "metrics.jsonl", state.at("epoch").get<std::int64_t>());
    MetricsFile metrics(dir / "metrics.jsonl", true);
    const fpq::Teacher teacher = teacher_for_run(cfg, data, dir, {});
    fpq::SummaryRow row{"run", cfg, "OK", "", teacher.test_accuracy, {}};
    fpq::LayeredModel student;
    fpq::TrainHooks hooks{metrics.sink(), dir.string(), stop_after};
    row.state = fpq::resume(ckpt, student, teacher.model, cfg, data, hooks);
    if (row.state.epoch < cfg.epochs) {
      std::cout << "stopped after epoch " << row.state.epoch << "; resume with --resume " << dir.string() << "\n";
      return kOk;
    }
    fpq::Checkpoint final_ckpt;
    fpq::save_model(final_ckpt, student);
    final_ckpt.save((dir / "final.ckpt").string());
    finish_run(dir, manifest, row);
    print_result(dir, row);
    return kOk;
  }

  fpq::TrainConfig base;
  if (!from_manifest.empty()) apply_manifest(base, from_manifest);
  const fpq::TrainConfig cfg = opts.resolve(app, base);
  const auto data = load_data(cfg);
  const fs::path dir = fresh_run_dir(cfg, "");
  json manifest = manifest_for(cfg, data, "train");
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  write_text(dir / "config.ini", fpq::config_to_text(cfg));
  MetricsFile metrics(dir / "metrics.jsonl", false);

  const fpq::Teacher teacher = teacher_for_run(cfg, data, dir, metrics.sink());
  std::vector<std::string> warnings;
  fpq::LayeredModel student = fpq::make_student(cfg, data, teacher.model, &warnings);
  for (const auto& w : warnings) {
    metrics.sink()({{"kind", "calibration_warning"}, {"epoch", -1}, {"message", w}});
    std::cerr << "calibration warning: " << w << "\n";
  }
  fpq::SummaryRow row{"run", cfg, "OK", "", teacher.test_accuracy, {}};
  fpq::TrainHooks hooks{metrics.sink(), dir.string(), stop_after};
  try {
    row.state = fpq::train(student, teacher.model, cfg, data, hooks);
  } catch (const fpq::DivergenceError&) {
    manifest["status"] = "diverged";
    manifest["end_time"] = utc_now("%Y-%m-%dT%H:%M:%SZ");
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    throw;
  }
  if (row.state.epoch < cfg.epochs) {
    std::cout << "stopped after epoch " << row.state.epoch << "; resume with --resume " << dir.string() << "\n";
    return kOk;
  }
  fpq::Checkpoint final_ckpt;
  fpq::save_model(final_ckpt, student);
  final_ckpt.save((dir / "final.ckpt").string());
  finish_run(dir, manifest, row);
  print_result(dir, row);
  return kOk;
}

int cmd_eval(CLI::App* app, const ConfigOptions& opts, const std::string& checkpoint) {
  const fpq::TrainConfig cfg = opts.resolve(app, {});
  const fpq::Checkpoint ckpt = fpq::Checkpoint::load(checkpoint);
  const std::string prefix = ckpt.has("model.config") ? "model." : "teacher.";
  const fpq::LayeredModel model = fpq::load_model(ckpt, prefix);
  const auto data = load_data(cfg);
  std::cout << "accuracy " << fixed(fpq::evaluate(model, data.test), 4) << " on " << data.test.size() << " "
            << data.test.name << " test images\n";
  return kOk;
}

struct ProbeArgs {
  std::string kind;
  std::string checkpoint;
  std::string out;
  int probes = 100;
  std::int64_t batch = 128;
  bool exact = false;
  std::string mode = "feature-perturb";
  double p = 0.1;
  int batches = 100;
  double sigma = 0.05;
  int trials = 1000;
  std::int64_t samples = 256;
  std::string fixture = "square";
  double amplitude = 0.5;
};

fpq::LayeredModel load_probe_model(const std::string& path) {
  if (path.empty()) throw fpq::ConfigError("this probe needs --checkpoint");
  const fpq::Checkpoint ckpt = fpq::Checkpoint::load(path);
  return fpq::load_model(ckpt, ckpt.has("model.config") ? "model." : "teacher.");
}

std::vector<std::int64_t> first_n(std::int64_t n, std::int64_t size) {
  std::vector<std::int64_t> idx;
  for (std::int64_t i = 0; i < std::min(n, size); ++i) idx.push_back(i);
  return idx;
}

int cmd_probe(CLI::App* app, const ConfigOptions& opts, const ProbeArgs& a) {
  const fpq::TrainConfig cfg = opts.resolve(app, {});
  json report = {{"probe", a.kind}, {"code_version", FPQ_VERSION}};
  fpq::Rng rng(fpq::derive_seed(cfg.seed, "probe-" + a.kind));

  if (a.kind == "bias") {
    if (a.amplitude <= 0.0) throw fpq::ConfigError("--a must be > 0");
    const float s = static_cast<float>(2.0 * a.amplitude);  // U[-s/2, s/2] = U[-a, a]
    fpq::LayerChain chain = a.fixture == "square"       ? fpq::square_fixture(s)
                            : a.fixture == "two-square" ? fpq::two_square_fixture(s)
                            : a.fixture == "linear"     ? fpq::linear_fixture(s)
                                                        : throw fpq::ConfigError("--fixture must be square, two-square or linear");
    fpq::PerturbPolicy policy{a.p, fpq::PerturbTarget::Features, cfg.seed, {}};
    policy.validate();
    const fpq::Tensor x = fpq::Tensor::from({1}, {1.0f});
    const auto r = fpq::estimate_accumulated_bias(chain, x, policy, a.trials, rng);
    report.update({{"fixture", a.fixture},
                   {"a", a.amplitude},
                   {"p", a.p},
                   {"trials", r.trials},
                   {"layer_bias", r.layer_bias},
                   {"layer_stderr", r.layer_stderr},
                   {"output_bias", r.output_bias},
                   {"output_stderr", r.output_stderr},
                   {"significant", r.significant}});
    if (a.fixture == "square") report["analytic_bias"] = a.amplitude * a.amplitude / 3.0 * a.p;
  } else {
    const fpq::LayeredModel model = load_probe_model(a.checkpoint);
    report["checkpoint"] = a.checkpoint;
    const auto data = load_data(cfg);
    if (a.kind == "trace") {
      const fpq::Batch batch = fpq::gather(data.train, first_n(a.batch, data.train.size()));
      const auto t = fpq::model_hessian_trace(model, batch, a.probes, rng);
      report.update({{"mean", t.estimate.mean},
                     {"std_error", t.estimate.std_error},
                     {"probes", t.estimate.probes},
                     {"smooth_twin", t.smooth_twin},
                     {"kink_margin", t.kink_margin},
                     {"loss", t.description},
                     {"batch", static_cast<std::int64_t>(batch.labels.size())}});
      if (a.exact) {
        const fpq::LayeredModel probe_model =
            t.smooth_twin ? model.with_activation(fpq::Activation::SmoothRelu) : model;
        const auto params = probe_model.weight_tensors();
        report["exact"] = fpq::exact_hessian_trace(
            [&] { return fpq::softmax_cross_entropy(fpq::forward(probe_model, batch.images), batch.labels); }, params);
      }
    } else if (a.kind == "gradnorm") {
      std::vector<std::vector<std::int64_t>> batches;
      for (std::int64_t e = 0; static_cast<int>(batches.size()) < a.batches; ++e) {
        for (auto& b : fpq::batch_indices(data.train.size(), cfg.batch_size, cfg.seed, e)) {
          if (static_cast<int>(batches.size()) < a.batches) batches.push_back(std::move(b));
        }
      }
      const auto mode = fpq::grad_norm_mode_from_string(a.mode);
      const auto norms = fpq::grad_norm_trajectory(model, data.train, batches, mode, a.p, cfg.seed);
      double mean = 0.0;
      for (double n : norms) mean += n;
      mean /= static_cast<double>(norms.size());
      report.update({{"mode", fpq::to_string(mode)}, {"p", a.p}, {"batches", norms.size()}, {"mean", mean},
                     {"norms", norms}});
    } else if (a.kind == "stability") {
      const fpq::Batch b = fpq::gather(data.test, first_n(a.samples, data.test.size()));
      double mean = 0.0, sq = 0.0;
      for (float v : b.images.data()) {
        mean += v;
        sq += static_cast<double>(v) * v;
      }
      const double n = static_cast<double>(b.images.numel());
      mean /= n;
      const double input_std = std::sqrt(std::max(0.0, sq / n - mean * mean));
      const auto r = fpq::stability_probe(model, b.images, a.sigma * input_std, std::max(a.trials, 2), rng);
      report.update({{"sigma_fraction", a.sigma}, {"sigma", r.sigma}, {"trials", r.trials}, {"variance", r.variance},
                     {"samples", static_cast<std::int64_t>(b.labels.size())}});
    } else {
      throw fpq::ConfigError("unknown probe '" + a.kind + "' (expected trace, gradnorm, stability or bias)");
    }
  }

  const std::string text = report.dump(2) + "\n";
  if (!a.out.empty()) write_text(a.out, text);
  std::cout << text;
  return kOk;
}

int cmd_ablate(CLI::App* app, const ConfigOptions& opts, const std::string& grid_spec) {
  const fpq::TrainConfig cfg = opts.resolve(app, {});
  const auto grid = fpq::parse_grid(grid_spec);
  const auto data = load_data(cfg);
  const fs::path dir = fresh_run_dir(cfg, "ablate-");
  json manifest = manifest_for(cfg, data, "ablate");
  manifest["grid"] = grid_spec;
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  write_text(dir / "config.ini", fpq::config_to_text(cfg));

  MetricsFile teacher_metrics(dir / "teacher_metrics.jsonl", false);
  const fpq::Teacher teacher = teacher_for_run(cfg, data, dir, teacher_metrics.sink());
  std::vector<std::unique_ptr<MetricsFile>> files;
  fpq::AblationHooks hooks;
  auto cell_dir = [&](const fpq::AblationCell& cell) {
    std::string name = cell.label;
    for (auto& c : name) {
      if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '.') c = '_';
    }
    fs::path d = dir / name;
    fs::create_directories(d);
    return d;
  };
  hooks.metrics = [&](const fpq::AblationCell& cell) {
    files.push_back(std::make_unique<MetricsFile>(cell_dir(cell) / "metrics.jsonl", false));
    return files.back()->sink();
  };
  hooks.checkpoint_dir = [&](const fpq::AblationCell& cell) { return cell_dir(cell).string(); };

  const auto rows = fpq::ablate(cfg, grid, data, teacher, hooks);
  std::string csv = fpq::summary_csv_header() + "\n";
  for (const auto& r : rows) csv += fpq::summary_csv_line(r) + "\n";
  const std::string table = fpq::render_ablation_table(rows);
  write_text(dir / "summary.csv", csv);
  write_text(dir / "table.txt", table);
  int status = kOk;
  for (const auto& r : rows) {
    if (r.status == "OK") continue;
    std::cerr << "cell " << r.label << " FAILED: " << r.error << "\n";
    status = status == kDiverged || r.error.find("diverged") != std::string::npos ? kDiverged : kUsage;
  }
  manifest["end_time"] = utc_now("%Y-%m-%dT%H:%M:%SZ");
  manifest["status"] = status == kOk ? "completed" : "failed";
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  std::cout << table << "run directory: " << dir.string() << "\n";
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantization-aware training with stochastic feature perturbation and channel-wise distillation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", FPQ_VERSION);

  ConfigOptions train_opts, eval_opts, probe_opts, ablate_opts;
  std::string from_manifest, resume_dir, checkpoint, grid = "perturb-csd";
  std::int64_t stop_after = 0;
  ProbeArgs probe;

  auto* train = app.add_subcommand("train", "calibrate and fine-tune a quantized student");
  train_opts.attach(train);
  train->add_option("--from-manifest", from_manifest, "reuse the resolved config of a previous run");
  train->add_option("--resume", resume_dir, "continue an interrupted run directory");
  train->add_option("--stop-after-epochs", stop_after, "stop early after this many epochs (resumable)");

  auto* eval = app.add_subcommand("eval", "test accuracy of a checkpoint");
  eval_opts.attach(eval);
  eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();

  auto* probe_cmd = app.add_subcommand("probe", "analysis probes: trace, gradnorm, stability, bias");
  probe_opts.attach(probe_cmd);
  probe_cmd->add_option("kind", probe.kind, "trace | gradnorm | stability | bias")->required();
  probe_cmd->add_option("--checkpoint", probe.checkpoint, "model checkpoint");
  probe_cmd->add_option("--out", probe.out, "write the JSON report here as well");
  probe_cmd->add_option("--probes", probe.probes, "trace: Hutchinson probes");
  probe_cmd->add_option("--batch", probe.batch, "trace: training images in the batch");
  probe_cmd->add_flag("--exact", probe.exact, "trace: also compute the finite-difference trace");
  probe_cmd->add_option("--mode", probe.mode, "gradnorm: none | feature-perturb | weight-perturb");
  probe_cmd->add_option("--probability", probe.p, "gradnorm/bias: perturbation probability");
  probe_cmd->add_option("--batches", probe.batches, "gradnorm: number of batches");
  probe_cmd->add_option("--sigma", probe.sigma, "stability: noise std as a fraction of the input std");
  probe_cmd->add_option("--trials", probe.trials, "stability/bias: Monte-Carlo trials");
  probe_cmd->add_option("--samples", probe.samples, "stability: test images");
  probe_cmd->add_option("--fixture", probe.fixture, "bias: square | two-square | linear");
  probe_cmd->add_option("--a", probe.amplitude, "bias: noise half-width, delta ~ U[-a, a]");

  auto* ablate = app.add_subcommand("ablate", "one run per grid cell with shared seed, data and teacher");
  ablate_opts.attach(ablate);
  ablate->add_option("--grid", grid, "perturb-csd or p-sweep:<p1>,<p2>,...");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(train, train_opts, from_manifest, resume_dir, stop_after);
    if (*eval) return cmd_eval(eval, eval_opts, checkpoint);
    if (*probe_cmd) {
      // --p is the config key; the bias and gradnorm probes read it too.
      if (probe_cmd->count("--p") > 0 && probe_cmd->count("--probability") == 0) {
        probe.p = probe_opts.resolve(probe_cmd, {}).p;
      }
      return cmd_probe(probe_cmd, probe_opts, probe);
    }
    if (*ablate) return cmd_ablate(ablate, ablate_opts, grid);
  } catch (const fpq::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const fpq::VersionError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kData;
  } catch (const fpq::ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kData;
  } catch (const fpq::DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return kDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
