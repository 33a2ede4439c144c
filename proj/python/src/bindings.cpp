#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <vector>

#include "fpq/checkpoint.hpp"
#include "fpq/config.hpp"
#include "fpq/distillation.hpp"
#include "fpq/error.hpp"
#include "fpq/model.hpp"
#include "fpq/perturbation.hpp"
#include "fpq/quantizer.hpp"
#include "fpq/trainer.hpp"

namespace py = pybind11;

namespace {

using Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

fpq::Tensor to_tensor(const Array& a) {
  fpq::Shape shape(a.shape(), a.shape() + a.ndim());
  return fpq::Tensor::from(std::move(shape), std::vector<float>(a.data(), a.data() + a.size()));
}

Array to_array(const fpq::Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  auto values = t.data();
  std::copy(values.begin(), values.end(), out.mutable_data());
  return out;
}

fpq::QuantMode quant_mode(bool symmetric) { return symmetric ? fpq::QuantMode::Symmetric : fpq::QuantMode::Asymmetric; }

fpq::QuantSpec make_spec(const std::vector<float>& scale, const std::vector<int>& zero_point, int bits,
                         bool symmetric) {
  if (scale.empty() || scale.size() != zero_point.size()) {
    throw fpq::ConfigError("scale and zero_point need the same non-zero length");
  }
  fpq::QuantSpec spec;
  spec.bits = bits;
  spec.mode = quant_mode(symmetric);
  spec.granularity = scale.size() == 1 ? fpq::Granularity::PerTensor : fpq::Granularity::PerChannel;
  spec.scale = fpq::Tensor::from({static_cast<std::int64_t>(scale.size())}, scale);
  spec.zero_point.assign(zero_point.begin(), zero_point.end());
  return spec;
}

fpq::CsdReduction reduction_from(const std::string& name) {
  if (name == "sum") return fpq::CsdReduction::Sum;
  if (name == "mean") return fpq::CsdReduction::Mean;
  throw fpq::ConfigError("unknown reduction '" + name + "' (expected sum or mean)");
}

// TrainConfig exposed as a mapping from config keys to their textual values.
struct ConfigHandle {
  fpq::TrainConfig cfg;

  void set(const std::string& key, const py::object& value) {
    std::string text;
    if (py::isinstance<py::bool_>(value)) {
      text = value.cast<bool>() ? "true" : "false";
    } else {
      text = py::str(value).cast<std::string>();
    }
    fpq::set_config_value(cfg, key, text);
  }
  py::dict as_dict() const {
    py::dict d;
    for (const auto& [k, v] : fpq::config_entries(cfg)) d[py::str(k)] = v;
    return d;
  }
};

ConfigHandle config_from(const py::kwargs& kwargs) {
  ConfigHandle c;
  for (const auto& [k, v] : kwargs) c.set(k.cast<std::string>(), py::reinterpret_borrow<py::object>(v));
  return c;
}

py::dict run_state(const fpq::RunState& s) {
  py::dict d;
  d["epochs"] = s.epoch;
  d["steps"] = s.step;
  d["test_accuracy"] = s.final_accuracy;
  d["best_accuracy"] = s.best_accuracy;
  d["train_loss"] = s.last_train_loss;
  d["trace"] = s.last_trace;
  d["stability_variance"] = s.stability_variance;
  d["mean_grad_norm"] = s.grad_norm_count > 0 ? s.grad_norm_sum / static_cast<double>(s.grad_norm_count) : 0.0;
  d["epoch_accuracy"] = s.epoch_accuracy;
  d["zero_point_hash"] = s.zero_point_hash;
  return d;
}

py::dict bias_report(const fpq::BiasReport& r) {
  py::dict d;
  d["trials"] = r.trials;
  d["layer_bias"] = r.layer_bias;
  d["layer_stderr"] = r.layer_stderr;
  d["output_bias"] = r.output_bias;
  d["output_stderr"] = r.output_stderr;
  d["significant"] = r.significant;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Feature-perturbed quantization-aware training on small networks";
  m.attr("__version__") = FPQ_VERSION;

  auto error = py::register_exception<fpq::Error>(m, "Error");
  py::register_exception<fpq::ConfigError>(m, "ConfigError", error);
  py::register_exception<fpq::ShapeError>(m, "ShapeError", error);
  py::register_exception<fpq::NonFiniteError>(m, "NonFiniteError", error);
  py::register_exception<fpq::ParseError>(m, "ParseError", error);
  py::register_exception<fpq::VersionError>(m, "VersionError", error);
  py::register_exception<fpq::DivergenceError>(m, "DivergenceError", error);

  m.def(
      "fake_quantize",
      [](const Array& x, std::vector<float> scale, std::vector<int> zero_point, int bits, bool symmetric) {
        return to_array(fpq::fake_quantize(to_tensor(x), make_spec(scale, zero_point, bits, symmetric)));
      },
      py::arg("x"), py::arg("scale"), py::arg("zero_point"), py::arg("bits") = 8, py::arg("symmetric") = false,
      "Quantize-dequantize x. One scale entry means per-tensor, otherwise one per slice of axis 0.");

  m.def(
      "calibrate",
      [](const Array& samples, int bits, bool per_channel, bool symmetric, const std::string& zero_point_init) {
        fpq::CalibrationOptions opts;
        opts.bits = bits;
        opts.granularity = per_channel ? fpq::Granularity::PerChannel : fpq::Granularity::PerTensor;
        opts.mode = quant_mode(symmetric);
        opts.zero_point_init = zero_point_init == "from-min" ? fpq::ZeroPointInit::FromMin : fpq::ZeroPointInit::MaxOnly;
        if (zero_point_init != "from-min" && zero_point_init != "max-only") {
          throw fpq::ConfigError("unknown zero_point_init '" + zero_point_init + "' (expected max-only or from-min)");
        }
        opts.learnable = false;
        const auto cal = fpq::calibrate(to_tensor(samples), opts);
        py::dict d;
        d["scale"] = cal.spec.scale.to_vector();
        d["zero_point"] = std::vector<int>(cal.spec.zero_point.begin(), cal.spec.zero_point.end());
        d["warnings"] = cal.warnings;
        return d;
      },
      py::arg("samples"), py::arg("bits") = 8, py::arg("per_channel") = false, py::arg("symmetric") = false,
      py::arg("zero_point_init") = "max-only");

  m.def(
      "uniform_delta",
      [](std::vector<std::int64_t> shape, float s, std::uint64_t seed) {
        fpq::Rng rng(seed);
        return to_array(fpq::sample_uniform_delta(shape, s, rng));
      },
      py::arg("shape"), py::arg("s"), py::arg("seed") = 0, "Draws from U[-s/2, s/2].");

  m.def(
      "standardize", [](const Array& z, float eps) { return to_array(fpq::standardize(to_tensor(z), eps)); },
      py::arg("z"), py::arg("eps") = fpq::kStandardizeEps);

  m.def(
      "csd_loss",
      [](const std::vector<Array>& student, const std::vector<Array>& teacher, float eps, const std::string& reduction) {
        if (student.size() != teacher.size()) throw fpq::ConfigError("student and teacher need the same layer count");
        std::vector<fpq::LayerTap> taps;
        for (std::size_t i = 0; i < student.size(); ++i) {
          taps.push_back({static_cast<int>(i), to_tensor(student[i]), to_tensor(teacher[i])});
        }
        return static_cast<double>(fpq::csd_loss(taps, {eps, reduction_from(reduction)}).item());
      },
      py::arg("student"), py::arg("teacher"), py::arg("eps") = fpq::kStandardizeEps, py::arg("reduction") = "sum",
      "Distance between per-channel standardized feature maps, one array per layer.");

  m.def(
      "accumulated_bias",
      [](const std::string& fixture, float s, double p, int trials, std::uint64_t seed,
         std::optional<Array> x) {
        fpq::LayerChain chain = fixture == "square"       ? fpq::square_fixture(s)
                                : fixture == "two-square" ? fpq::two_square_fixture(s)
                                : fixture == "linear"     ? fpq::linear_fixture(s)
                                                          : throw fpq::ConfigError("unknown fixture '" + fixture +
                                                                                   "' (expected square, two-square, "
                                                                                   "linear)");
        fpq::PerturbPolicy policy{.p = p, .target = fpq::PerturbTarget::Features};
        fpq::Rng rng(seed);
        const fpq::Tensor input = x ? to_tensor(*x) : fpq::Tensor::from({3}, {0.5f, -0.4f, 0.8f});
        return bias_report(fpq::estimate_accumulated_bias(chain, input, policy, trials, rng));
      },
      py::arg("fixture") = "square", py::arg("s") = 0.4f, py::arg("p") = 1.0, py::arg("trials") = 10000,
      py::arg("seed") = 0, py::arg("x") = py::none(),
      "Monte-Carlo bias of feature perturbation on a fixture with a known answer.");

  py::class_<ConfigHandle>(m, "Config", "Training configuration keyed by section.key or the bare key name.")
      .def(py::init(&config_from))
      .def_static(
          "from_file",
          [](const std::string& path) {
            ConfigHandle c;
            fpq::apply_config_file(c.cfg, path);
            return c;
          },
          py::arg("path"))
      .def_static("keys", [] {
        std::vector<std::string> out;
        for (const auto& k : fpq::config_keys()) out.push_back(k.qualified());
        return out;
      })
      .def("__getitem__", [](const ConfigHandle& c, const std::string& key) { return fpq::get_config_value(c.cfg, key); })
      .def("__setitem__", &ConfigHandle::set)
      .def("to_dict", &ConfigHandle::as_dict)
      .def("to_text", [](const ConfigHandle& c) { return fpq::config_to_text(c.cfg); })
      .def("hash", [](const ConfigHandle& c) { return fpq::config_hash(c.cfg); })
      .def("validate", [](const ConfigHandle& c) { fpq::validate(c.cfg); })
      .def("__repr__", [](const ConfigHandle& c) { return "Config(hash=" + fpq::config_hash(c.cfg).substr(0, 12) + ")"; });

  py::class_<fpq::LayeredModel>(m, "Model", "A trained network loaded from a checkpoint.")
      .def_static(
          "load",
          [](const std::string& path) {
            const auto ckpt = fpq::Checkpoint::load(path);
            return fpq::load_model(ckpt, ckpt.has("model.config") ? "model." : "teacher.");
          },
          py::arg("path"))
      .def("save",
           [](const fpq::LayeredModel& model, const std::string& path) {
             fpq::Checkpoint ckpt;
             fpq::save_model(ckpt, model);
             ckpt.save(path);
           })
      .def(
          "__call__", [](const fpq::LayeredModel& model, const Array& x) { return to_array(fpq::forward(model, to_tensor(x))); },
          py::arg("x"), "Logits in eval mode for an (n, c, h, w) batch.")
      .def_property_readonly("quantized", [](const fpq::LayeredModel& model) { return model.config.quantized; })
      .def_property_readonly("zero_point_digest", &fpq::zero_point_digest);

  m.def(
      "train",
      [](const ConfigHandle& config) {
        fpq::validate(config.cfg);
        fpq::TrainConfig cfg = config.cfg;
        fpq::LayeredModel student;
        fpq::Teacher teacher;
        fpq::RunState state;
        {
          py::gil_scoped_release release;
          const auto data = fpq::load_experiment_data(cfg);
          teacher = fpq::prepare_teacher(cfg, data);
          student = fpq::make_student(cfg, data, teacher.model);
          state = fpq::train(student, teacher.model, cfg, data);
        }
        py::dict result = run_state(state);
        result["teacher_accuracy"] = teacher.test_accuracy;
        result["config_hash"] = fpq::config_hash(cfg);
        return py::make_tuple(student, result);
      },
      py::arg("config"), "Trains teacher and student; returns (student, summary).");

  m.def(
      "evaluate",
      [](const fpq::LayeredModel& model, const ConfigHandle& config) {
        py::gil_scoped_release release;
        const auto data = fpq::load_experiment_data(config.cfg);
        return fpq::evaluate(model, data.test);
      },
      py::arg("model"), py::arg("config"), "Top-1 test accuracy on the configured dataset.");
}
