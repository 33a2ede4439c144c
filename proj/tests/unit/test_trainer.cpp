#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include "doctest.h"
#include "fpq/config.hpp"
#include "fpq/error.hpp"
#include "fpq/trainer.hpp"

using namespace fpq;
namespace fs = std::filesystem;

namespace {

// 8x8 single-channel images whose class is encoded by which pixel row is
// bright, plus noise. Learnable in a few steps by the toy CNN.
Dataset synthetic(std::int64_t n, std::uint64_t seed, Split split) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.0f, 0.3f);
  Dataset ds;
  ds.name = "mnist";
  ds.split = split;
  ds.num_classes = 10;
  std::vector<float> px(static_cast<std::size_t>(n * 64));
  for (std::int64_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 10);
    ds.labels.push_back(label);
    for (int y = 0; y < 8; ++y) {
      for (int x = 0; x < 8; ++x) {
        const bool on = (label < 8 && y == label) || (label >= 8 && x == label - 8);
        px[static_cast<std::size_t>(i * 64 + y * 8 + x)] = (on ? 1.5f : -0.5f) + noise(rng);
      }
    }
  }
  ds.images = Tensor::from({n, 1, 8, 8}, std::move(px));
  ds.normalization = default_normalization(DatasetKind::Mnist);
  return ds;
}

ExperimentData tiny_data() { return {synthetic(80, 1, Split::Train), synthetic(40, 2, Split::Test)}; }

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.width = 4;
  cfg.batch_size = 16;
  cfg.epochs = 2;
  cfg.teacher_epochs = 15;
  cfg.teacher_batch_size = 16;
  cfg.calib_size = 20;
  cfg.trace_every_epochs = 0;
  cfg.stability_trials = 4;
  cfg.stability_samples = 16;
  cfg.gradnorm_every_steps = 2;
  return cfg;
}

std::vector<std::vector<float>> weights_of(const LayeredModel& m) {
  std::vector<std::vector<float>> out;
  for (const auto& t : m.weight_parameters()) out.push_back(t.to_vector());
  for (const auto& t : m.scale_parameters()) out.push_back(t.to_vector());
  return out;
}

fs::path scratch_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("fpq_trainer_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("config keys resolve qualified or bare and reject unknown names") {
  TrainConfig cfg;
  set_config_value(cfg, "optim.lr", "0.05");
  set_config_value(cfg, "wbits", "2");
  CHECK(cfg.lr == doctest::Approx(0.05));
  CHECK(cfg.wbits == 2);
  try {
    set_config_value(cfg, "learning_rate", "1");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("learning_rate") != std::string::npos);
    CHECK(msg.find("optim.lr") != std::string::npos);
  }
  CHECK_THROWS_AS(set_config_value(cfg, "epochs", "ten"), ConfigError);
  CHECK_THROWS_AS(set_config_value(cfg, "csd", "maybe"), ConfigError);
}

TEST_CASE("p outside [0, 1] fails validation naming the constraint") {
  TrainConfig cfg;
  cfg.p = 1.5;
  try {
    validate(cfg);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("p in [0, 1]") != std::string::npos);
  }
  cfg.p = 1.0;
  CHECK_NOTHROW(validate(cfg));
}

TEST_CASE("config text round-trips and the hash tracks every value") {
  TrainConfig cfg;
  apply_config_text(cfg, "# comment\n[optim]\nlr = 0.02\nepochs = 3  # trailing\n[fpq]\np = 0.3\ncsd = off\n");
  CHECK(cfg.lr == doctest::Approx(0.02));
  CHECK(cfg.epochs == 3);
  CHECK(cfg.p == doctest::Approx(0.3));
  CHECK_FALSE(cfg.csd);

  TrainConfig again;
  apply_config_text(again, config_to_text(cfg));
  CHECK(config_to_text(again) == config_to_text(cfg));
  CHECK(config_hash(again) == config_hash(cfg));
  again.seed = 7;
  CHECK(config_hash(again) != config_hash(cfg));
  CHECK(config_entries(cfg).size() == config_keys().size());
  CHECK_THROWS_AS(apply_config_text(cfg, "[optim]\nlr 0.1\n"), ConfigError);
}

TEST_CASE("cosine schedule hits lr0, lr0/2 and 0") {
  CHECK(cosine_lr(0.01, 0, 100) == doctest::Approx(0.01));
  CHECK(cosine_lr(0.01, 50, 100) == doctest::Approx(0.005));
  CHECK(cosine_lr(0.01, 100, 100) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(cosine_lr(0.01, 25, 100) > cosine_lr(0.01, 75, 100));
}

TEST_CASE("weight decay reaches weights but not quantizer scales") {
  const auto data = tiny_data();
  const TrainConfig cfg = tiny_config();
  LayeredModel teacher = build(model_config(cfg, data.train, false));
  LayeredModel student = make_student(cfg, data, teacher);
  const auto groups = parameter_groups(student, 5e-4);
  REQUIRE(groups.size() == 2);
  CHECK(groups[0].name == "weights");
  CHECK(groups[0].weight_decay == doctest::Approx(5e-4));
  CHECK_FALSE(groups[0].scales);
  CHECK(groups[1].name == "scales");
  CHECK(groups[1].weight_decay == 0.0);
  CHECK(groups[1].scales);
  CHECK(groups[1].params.size() == 2 * student.conv_count() + 2);
}

TEST_CASE("SGD momentum update and scale clamping") {
  Tensor w = Tensor::from({2}, {1.0f, -1.0f});
  Tensor s = Tensor::from({1}, {1e-3f});
  Sgd opt({{"weights", {w}, 0.1, false}, {"scales", {s}, 0.0, true}}, 0.9);
  opt.step({{Tensor::from({2}, {0.5f, 0.5f})}, {Tensor::from({1}, {1.0f})}}, 0.1);
  // buf = g + wd w = (0.6, 0.4); w -= 0.1 buf
  CHECK(w.data()[0] == doctest::Approx(0.94));
  CHECK(w.data()[1] == doctest::Approx(-1.04));
  CHECK(s.data()[0] == kMinScale);
  opt.step({{Tensor::from({2}, {0.0f, 0.0f})}, {Tensor::from({1}, {0.0f})}}, 0.1);
  // buf = 0.9 (0.6, 0.4) + 0.1 w
  CHECK(w.data()[0] == doctest::Approx(0.94 - 0.1 * (0.54 + 0.094)));
}

TEST_CASE("constant logits score chance on a balanced set") {
  const auto data = tiny_data();
  LayeredModel m = build(model_config(tiny_config(), data.train, false));
  for (auto& c : m.convs) std::fill(c.gamma.mutable_data().begin(), c.gamma.mutable_data().end(), 0.0f);
  std::fill(m.fc.bias.mutable_data().begin(), m.fc.bias.mutable_data().end(), 0.0f);
  CHECK(evaluate(m, data.test) == doctest::Approx(0.1));
}

TEST_CASE("training is deterministic and keeps zero-points frozen") {
  const auto data = tiny_data();
  const TrainConfig cfg = tiny_config();
  const Teacher teacher = prepare_teacher(cfg, data);
  CHECK(teacher.test_accuracy > 0.5);

  LayeredModel a = make_student(cfg, data, teacher.model);
  LayeredModel b = make_student(cfg, data, teacher.model);
  const std::string zp = zero_point_digest(a);
  const RunState sa = train(a, teacher.model, cfg, data);
  const RunState sb = train(b, teacher.model, cfg, data);
  CHECK(weights_of(a) == weights_of(b));
  CHECK(sa.final_accuracy == sb.final_accuracy);
  CHECK(sa.step == 2 * 5);
  CHECK(sa.grad_norm_count == 5);
  CHECK(zero_point_digest(a) == zp);
  CHECK(sa.zero_point_hash == zp);
}

TEST_CASE("p = 0 follows the unperturbed trajectory step for step") {
  const auto data = tiny_data();
  TrainConfig cfg = tiny_config();
  cfg.csd = false;
  const Teacher teacher = prepare_teacher(cfg, data);
  auto losses = [&](const TrainConfig& c) {
    std::vector<double> out;
    LayeredModel s = make_student(c, data, teacher.model);
    train(s, teacher.model, c, data, {[&](const nlohmann::json& row) {
            if (row["kind"] == "step") out.push_back(row["total"].get<double>());
          }});
    return out;
  };
  TrainConfig off = cfg;
  off.perturb = "off";
  TrainConfig zero = cfg;
  zero.perturb = "features";
  zero.p = 0.0;
  const auto a = losses(off);
  CHECK(a.size() == 10);
  CHECK(a == losses(zero));
  TrainConfig on = zero;
  on.p = 1.0;
  CHECK(a != losses(on));
}

TEST_CASE("divergence writes a checkpoint and raises") {
  const auto data = tiny_data();
  TrainConfig cfg = tiny_config();
  const Teacher teacher = prepare_teacher(cfg, data);
  cfg.divergence_threshold = 1e-3;
  LayeredModel s = make_student(cfg, data, teacher.model);
  const fs::path dir = scratch_dir("diverge");
  CHECK_THROWS_AS(train(s, teacher.model, cfg, data, {{}, dir.string(), 0}), DivergenceError);
  CHECK(fs::exists(dir / "diverged.ckpt"));
  const Checkpoint ckpt = Checkpoint::load((dir / "diverged.ckpt").string());
  CHECK(ckpt.has("state"));
  CHECK(ckpt.has("model.config"));
}

TEST_CASE("resuming from an epoch checkpoint reproduces the uninterrupted run") {
  const auto data = tiny_data();
  TrainConfig cfg = tiny_config();
  cfg.epochs = 3;
  const Teacher teacher = prepare_teacher(cfg, data);

  std::vector<std::string> full_rows, resumed_rows;
  LayeredModel full = make_student(cfg, data, teacher.model);
  const RunState fs_state =
      train(full, teacher.model, cfg, data, {[&](const nlohmann::json& r) { full_rows.push_back(r.dump()); }});

  const fs::path dir = scratch_dir("resume");
  LayeredModel first = make_student(cfg, data, teacher.model);
  const RunState partial = train(first, teacher.model, cfg, data,
                                 {[&](const nlohmann::json& r) { resumed_rows.push_back(r.dump()); }, dir.string(), 1});
  CHECK(partial.epoch == 1);
  LayeredModel second;
  const RunState rs = resume(Checkpoint::load((dir / "last.ckpt").string()), second, teacher.model, cfg, data,
                             {[&](const nlohmann::json& r) { resumed_rows.push_back(r.dump()); }, dir.string(), 0});
  CHECK(resumed_rows == full_rows);
  CHECK(weights_of(second) == weights_of(full));
  CHECK(rs.final_accuracy == fs_state.final_accuracy);
  CHECK(summary_csv_line({"x", cfg, "OK", "", 0.5, rs}) == summary_csv_line({"x", cfg, "OK", "", 0.5, fs_state}));

  TrainConfig other = cfg;
  other.lr = 0.02;
  LayeredModel third;
  CHECK_THROWS_AS(resume(Checkpoint::load((dir / "last.ckpt").string()), third, teacher.model, other, data), ConfigError);
}

TEST_CASE("ablation grids and failed cells") {
  CHECK(parse_grid("").empty());
  const auto grid = perturb_csd_grid();
  REQUIRE(grid.size() == 4);
  CHECK(grid.front().label == "baseline");
  CHECK(grid.back().label == "perturb+csd");
  const auto sweep = parse_grid("p-sweep:1,0.1,0.5,0");
  REQUIRE(sweep.size() == 4);
  CHECK(sweep[0].label == "p=0.00");
  CHECK(sweep[1].label == "p=0.10");
  CHECK(sweep[3].label == "p=1.00");
  CHECK_THROWS_AS(parse_grid("grid-of-doom"), ConfigError);

  const auto data = tiny_data();
  TrainConfig cfg = tiny_config();
  cfg.epochs = 1;
  cfg.stability_at_end = false;
  const Teacher teacher = prepare_teacher(cfg, data);
  CHECK(ablate(cfg, {}, data, teacher).empty());
  std::vector<AblationCell> cells = {{"ok", {{"fpq.p", "0.5"}}}, {"broken", {{"fpq.p", "2"}}}};
  const auto rows = ablate(cfg, cells, data, teacher);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].status == "OK");
  CHECK(rows[1].status == "FAILED");
  CHECK(rows[1].error.find("p in [0, 1]") != std::string::npos);
  const std::string table = render_ablation_table(rows);
  CHECK(table.find("FAILED") != std::string::npos);
  int lines = 0;
  for (char c : table) lines += c == '\n';
  CHECK(lines == 4);  // header, rule, two cells
}
