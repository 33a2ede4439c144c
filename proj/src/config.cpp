#include "fpq/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>
#include <type_traits>
#include <variant>

#include "fpq/error.hpp"
#include "fpq/hash.hpp"

namespace fpq {

namespace {

using Field = std::variant<std::int64_t TrainConfig::*, int TrainConfig::*, std::uint64_t TrainConfig::*,
                           double TrainConfig::*, bool TrainConfig::*, std::string TrainConfig::*>;

struct Entry {
  ConfigKey key;
  Field field;
};

const std::vector<Entry>& registry() {
  static const std::vector<Entry> entries = {
      {{"model", "arch", "string", "toy-cnn or mini-resnet"}, &TrainConfig::arch},
      {{"model", "width", "int", "channel base of the network"}, &TrainConfig::width},
      {{"data", "dataset", "string", "mnist or cifar10"}, &TrainConfig::dataset},
      {{"data", "data_root", "string", "dataset root directory"}, &TrainConfig::data_root},
      {{"data", "train_subset", "int", "first N training records (0 = all)"}, &TrainConfig::train_subset},
      {{"data", "cifar_train_subset", "int", "CIFAR-10 training records kept (0 = all)"},
       &TrainConfig::cifar_train_subset},
      {{"data", "augment", "bool", "dataset default augmentation during training"}, &TrainConfig::augment},
      {{"data", "calib_size", "int", "calibration images"}, &TrainConfig::calib_size},
      {{"quant", "wbits", "int", "weight bits"}, &TrainConfig::wbits},
      {{"quant", "abits", "int", "activation bits"}, &TrainConfig::abits},
      {{"quant", "keep_edges_8bit", "bool", "first conv and classifier at 8 bits"}, &TrainConfig::keep_edges_8bit},
      {{"quant", "quant_mode", "string", "asymmetric or symmetric"}, &TrainConfig::quant_mode},
      {{"quant", "zero_point_init", "string", "max-only or from-min"}, &TrainConfig::zero_point_init},
      {{"optim", "lr", "float", "base learning rate"}, &TrainConfig::lr},
      {{"optim", "momentum", "float", "SGD momentum"}, &TrainConfig::momentum},
      {{"optim", "weight_decay", "float", "weight decay (not applied to scales)"}, &TrainConfig::weight_decay},
      {{"optim", "batch_size", "int", "batch size"}, &TrainConfig::batch_size},
      {{"optim", "epochs", "int", "training epochs"}, &TrainConfig::epochs},
      {{"optim", "scheduler", "string", "cosine or constant"}, &TrainConfig::scheduler},
      {{"fpq", "p", "float", "per-layer perturbation probability"}, &TrainConfig::p},
      {{"fpq", "perturb", "string", "off, features or weights"}, &TrainConfig::perturb},
      {{"fpq", "perturb_first_layer", "bool", "perturb the input of the first conv"},
       &TrainConfig::perturb_first_layer},
      {{"fpq", "csd", "bool", "channel-wise standardization distillation"}, &TrainConfig::csd},
      {{"fpq", "csd_weight", "float", "weight of the distillation term"}, &TrainConfig::csd_weight},
      {{"fpq", "csd_reduction", "string", "sum or mean"}, &TrainConfig::csd_reduction},
      {{"teacher", "teacher_epochs", "int", "full-precision teacher epochs"}, &TrainConfig::teacher_epochs},
      {{"teacher", "teacher_lr", "float", "teacher learning rate"}, &TrainConfig::teacher_lr},
      {{"teacher", "teacher_batch_size", "int", "teacher batch size"}, &TrainConfig::teacher_batch_size},
      {{"teacher", "teacher_checkpoint", "string", "teacher checkpoint to reuse or create"},
       &TrainConfig::teacher_checkpoint},
      {{"probe", "trace_every_epochs", "int", "Hessian trace cadence in epochs (0 = off)"},
       &TrainConfig::trace_every_epochs},
      {{"probe", "trace_probes", "int", "Hutchinson probes per trace"}, &TrainConfig::trace_probes},
      {{"probe", "trace_batch", "int", "training images in the trace batch"}, &TrainConfig::trace_batch},
      {{"probe", "gradnorm_every_steps", "int", "weight-gradient norm cadence in steps (0 = off)"},
       &TrainConfig::gradnorm_every_steps},
      {{"probe", "stability_at_end", "bool", "input-noise stability probe after training"},
       &TrainConfig::stability_at_end},
      {{"probe", "stability_sigma", "float", "noise std as a fraction of the input std"},
       &TrainConfig::stability_sigma},
      {{"probe", "stability_trials", "int", "noise draws for the stability probe"}, &TrainConfig::stability_trials},
      {{"probe", "stability_samples", "int", "test images for the stability probe"},
       &TrainConfig::stability_samples},
      {{"run", "seed", "int", "seed for init, shuffling, calibration and noise"}, &TrainConfig::seed},
      {{"run", "divergence_threshold", "float", "abort when the loss exceeds this"},
       &TrainConfig::divergence_threshold},
      {{"run", "out_dir", "string", "parent directory of run directories"}, &TrainConfig::out_dir},
  };
  return entries;
}

std::string valid_keys() {
  std::string out;
  for (const auto& e : registry()) {
    if (!out.empty()) out += ", ";
    out += e.key.qualified();
  }
  return out;
}

const Entry& find(const std::string& key) {
  const Entry* match = nullptr;
  for (const auto& e : registry()) {
    if (e.key.qualified() == key || e.key.name == key) {
      match = &e;
      break;
    }
  }
  if (!match) throw ConfigError("unknown config key '" + key + "'; valid keys: " + valid_keys());
  return *match;
}

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value, const char* type) {
  T out{};
  const char* first = value.data();
  const char* last = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last || value.empty()) {
    throw ConfigError("config key '" + key + "' expects " + type + ", got '" + value + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "off" || value == "no") return false;
  throw ConfigError("config key '" + key + "' expects a boolean (true/false), got '" + value + "'");
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const auto& e : registry()) out.push_back(e.key);
    return out;
  }();
  return keys;
}

void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& raw) {
  const Entry& e = find(key);
  const std::string value = trim(raw);
  const std::string name = e.key.qualified();
  std::visit(
      [&](auto member) {
        using T = std::remove_reference_t<decltype(cfg.*member)>;
        if constexpr (std::is_same_v<T, std::string>) {
          cfg.*member = value;
        } else if constexpr (std::is_same_v<T, bool>) {
          cfg.*member = parse_bool(name, value);
        } else if constexpr (std::is_same_v<T, double>) {
          cfg.*member = parse_number<double>(name, value, "a number");
        } else {
          cfg.*member = parse_number<T>(name, value, "an integer");
        }
      },
      e.field);
}

std::string get_config_value(const TrainConfig& cfg, const std::string& key) {
  const Entry& e = find(key);
  return std::visit(
      [&](auto member) -> std::string {
        using T = std::remove_cvref_t<decltype(cfg.*member)>;
        if constexpr (std::is_same_v<T, std::string>) {
          return cfg.*member;
        } else if constexpr (std::is_same_v<T, bool>) {
          return cfg.*member ? "true" : "false";
        } else if constexpr (std::is_same_v<T, double>) {
          return format_double(cfg.*member);
        } else {
          return std::to_string(cfg.*member);
        }
      },
      e.field);
}

void apply_config_text(TrainConfig& cfg, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(origin + ":" + std::to_string(line_no) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    std::string key = trim(line.substr(0, eq));
    if (!section.empty() && key.find('.') == std::string::npos) key = section + "." + key;
    try {
      set_config_value(cfg, key, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

void apply_config_file(TrainConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream text;
  text << in.rdbuf();
  apply_config_text(cfg, text.str(), path);
}

std::vector<std::pair<std::string, std::string>> config_entries(const TrainConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : registry()) out.emplace_back(e.key.qualified(), get_config_value(cfg, e.key.qualified()));
  return out;
}

std::string config_to_text(const TrainConfig& cfg) {
  std::ostringstream out;
  std::string section;
  for (const auto& e : registry()) {
    if (e.key.section != section) {
      if (!section.empty()) out << '\n';
      section = e.key.section;
      out << '[' << section << "]\n";
    }
    out << e.key.name << " = " << get_config_value(cfg, e.key.qualified()) << '\n';
  }
  return out.str();
}

std::string config_hash(const TrainConfig& cfg) { return sha256_hex(config_to_text(cfg)); }

void validate(const TrainConfig& cfg) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  require(cfg.arch == "toy-cnn" || cfg.arch == "mini-resnet", "model.arch must be toy-cnn or mini-resnet");
  require(cfg.width >= 1, "model.width must be >= 1");
  require(cfg.dataset == "mnist" || cfg.dataset == "cifar10", "data.dataset must be mnist or cifar10");
  require(cfg.train_subset >= 0, "data.train_subset must be >= 0");
  require(cfg.cifar_train_subset >= 0, "data.cifar_train_subset must be >= 0");
  require(cfg.calib_size >= 1, "data.calib_size must be >= 1");
  require(cfg.wbits >= 2 && cfg.wbits <= 8, "quant.wbits must lie in [2, 8]");
  require(cfg.abits >= 2 && cfg.abits <= 8, "quant.abits must lie in [2, 8]");
  require(cfg.quant_mode == "asymmetric" || cfg.quant_mode == "symmetric",
          "quant.quant_mode must be asymmetric or symmetric");
  require(cfg.zero_point_init == "max-only" || cfg.zero_point_init == "from-min",
          "quant.zero_point_init must be max-only or from-min");
  require(cfg.lr > 0.0, "optim.lr must be > 0");
  require(cfg.momentum >= 0.0 && cfg.momentum < 1.0, "optim.momentum must lie in [0, 1)");
  require(cfg.weight_decay >= 0.0, "optim.weight_decay must be >= 0");
  require(cfg.batch_size >= 1, "optim.batch_size must be >= 1");
  require(cfg.epochs >= 1, "optim.epochs must be >= 1");
  require(cfg.scheduler == "cosine" || cfg.scheduler == "constant", "optim.scheduler must be cosine or constant");
  require(cfg.p >= 0.0 && cfg.p <= 1.0, "fpq.p must satisfy p in [0, 1], got " + format_double(cfg.p));
  require(cfg.perturb == "off" || cfg.perturb == "features" || cfg.perturb == "weights",
          "fpq.perturb must be off, features or weights");
  require(cfg.csd_weight >= 0.0, "fpq.csd_weight must be >= 0");
  require(cfg.csd_reduction == "sum" || cfg.csd_reduction == "mean", "fpq.csd_reduction must be sum or mean");
  require(cfg.teacher_epochs >= 0, "teacher.teacher_epochs must be >= 0");
  require(cfg.teacher_lr > 0.0, "teacher.teacher_lr must be > 0");
  require(cfg.teacher_batch_size >= 1, "teacher.teacher_batch_size must be >= 1");
  require(cfg.trace_every_epochs >= 0, "probe.trace_every_epochs must be >= 0");
  require(cfg.trace_probes >= 1, "probe.trace_probes must be >= 1");
  require(cfg.trace_batch >= 1, "probe.trace_batch must be >= 1");
  require(cfg.gradnorm_every_steps >= 0, "probe.gradnorm_every_steps must be >= 0");
  require(cfg.stability_sigma >= 0.0, "probe.stability_sigma must be >= 0");
  require(cfg.stability_trials >= 2, "probe.stability_trials must be >= 2");
  require(cfg.stability_samples >= 1, "probe.stability_samples must be >= 1");
  require(cfg.divergence_threshold > 0.0, "run.divergence_threshold must be > 0");
}

}  // namespace fpq
