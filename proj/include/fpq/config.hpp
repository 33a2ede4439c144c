#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace fpq {

// Every knob of a training run. Field defaults are the desk-scale defaults;
// the registry below names each one as `section.key`.
struct TrainConfig {
  // [model]
  std::string arch = "toy-cnn";
  std::int64_t width = 8;
  // [data]
  std::string dataset = "mnist";
  std::string data_root;  // empty: $FPQ_DATA_ROOT, then ./data
  std::int64_t train_subset = 0;  // first N training records, 0 keeps all
  std::int64_t cifar_train_subset = 5000;
  bool augment = true;
  std::int64_t calib_size = 100;
  // [quant]
  int wbits = 4;
  int abits = 4;
  bool keep_edges_8bit = true;
  std::string quant_mode = "asymmetric";
  std::string zero_point_init = "max-only";
  // [optim]
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::int64_t batch_size = 128;
  std::int64_t epochs = 30;
  std::string scheduler = "cosine";
  // [fpq]
  double p = 0.1;
  std::string perturb = "features";
  bool perturb_first_layer = true;
  bool csd = true;
  double csd_weight = 1.0;
  std::string csd_reduction = "mean";
  // [teacher]
  std::int64_t teacher_epochs = 8;
  double teacher_lr = 0.05;
  std::int64_t teacher_batch_size = 32;
  std::string teacher_checkpoint;  // reused when present, written otherwise
  // [probe]
  std::int64_t trace_every_epochs = 1;  // 0 disables
  std::int64_t trace_probes = 8;
  std::int64_t trace_batch = 128;
  std::int64_t gradnorm_every_steps = 10;  // 0 disables
  bool stability_at_end = true;
  double stability_sigma = 0.05;  // fraction of the input standard deviation
  std::int64_t stability_trials = 20;
  std::int64_t stability_samples = 256;
  // [run]
  std::uint64_t seed = 0;
  double divergence_threshold = 1e4;
  std::string out_dir = "runs";
};

struct ConfigKey {
  std::string section;
  std::string name;
  std::string type;  // int, float, bool, string
  std::string help;
  std::string qualified() const { return section + "." + name; }
};

// All keys in canonical order.
const std::vector<ConfigKey>& config_keys();

// Sets one key from its textual value. `key` may be qualified
// ("optim.lr") or bare ("lr"). Unknown keys raise ConfigError listing the
// valid ones; unparsable values name the key and the expected type.
void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const TrainConfig& cfg, const std::string& key);

// Flat key-value text with [section] headers and '#' comments.
void apply_config_text(TrainConfig& cfg, const std::string& text, const std::string& origin = "config");
void apply_config_file(TrainConfig& cfg, const std::string& path);

// Every key with its materialized value, in canonical order.
std::vector<std::pair<std::string, std::string>> config_entries(const TrainConfig& cfg);
std::string config_to_text(const TrainConfig& cfg);

// SHA-256 of the canonical text.
std::string config_hash(const TrainConfig& cfg);

// Range and vocabulary checks; throws ConfigError naming the constraint.
void validate(const TrainConfig& cfg);

}  // namespace fpq
