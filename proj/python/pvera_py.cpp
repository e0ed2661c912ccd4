#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "pvera/checkpoint.hpp"
#include "pvera/errors.hpp"
#include "pvera/evaluation.hpp"
#include "pvera/training.hpp"
#include "pvera/version.hpp"

namespace py = pybind11;
using namespace pvera;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Tensor from_numpy(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

py::dict train_report_dict(const TrainReport& r) {
  py::list epochs;
  for (const auto& e : r.epochs) {
    py::dict d;
    d["epoch"] = e.epoch;
    d["train_loss"] = e.train_loss;
    d["val_loss"] = e.val_loss;
    d["val_acc"] = e.val_acc;
    epochs.append(d);
  }
  py::dict d;
  d["epochs"] = epochs;
  d["best_epoch"] = r.best_epoch;
  d["best_val_loss"] = r.best_val_loss;
  d["epochs_run"] = r.epochs_run;
  d["stopped_early"] = r.stopped_early;
  d["optimizer_steps"] = r.optimizer_steps;
  d["wall_time_s"] = r.wall_time_s;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "PVeRA, VeRA and LoRA adapters on a small frozen transformer encoder";
  m.attr("__version__") = std::string(kVersion);

  static py::exception<Error> base(m, "PveraError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(base, e.what());
    }
  });

  py::enum_<AdapterKind>(m, "AdapterKind")
      .value("LINEAR", AdapterKind::LinearProbe)
      .value("LORA", AdapterKind::Lora)
      .value("VERA", AdapterKind::Vera)
      .value("PVERA", AdapterKind::Pvera);
  py::enum_<Mode>(m, "Mode").value("TRAIN", Mode::Train).value("DET", Mode::DetInfer).value("PROB", Mode::ProbInfer);
  py::enum_<DatasetKind>(m, "DatasetKind")
      .value("BLOBS", DatasetKind::Blobs)
      .value("RINGS", DatasetKind::Rings)
      .value("SHIFTED", DatasetKind::Shifted);
  py::enum_<Alternative>(m, "Alternative").value("LESS", Alternative::Less).value("GREATER", Alternative::Greater);
  py::enum_<OodReduction>(m, "OodReduction")
      .value("MEAN", OodReduction::Mean)
      .value("MEAN_ABS", OodReduction::MeanAbs);

  py::class_<BackboneConfig>(m, "BackboneConfig")
      .def(py::init<>())
      .def_readwrite("d", &BackboneConfig::d)
      .def_readwrite("seq_len", &BackboneConfig::seq_len)
      .def_readwrite("n_layers", &BackboneConfig::n_layers)
      .def_readwrite("n_heads", &BackboneConfig::n_heads)
      .def_readwrite("n_classes", &BackboneConfig::n_classes)
      .def_readwrite("mlp_ratio", &BackboneConfig::mlp_ratio);

  py::class_<AdapterConfig>(m, "AdapterConfig")
      .def(py::init<>())
      .def_readwrite("kind", &AdapterConfig::kind)
      .def_readwrite("rank", &AdapterConfig::rank)
      .def_readwrite("alpha", &AdapterConfig::alpha)
      .def_readwrite("beta", &AdapterConfig::beta)
      .def_readwrite("adapter_lr", &AdapterConfig::adapter_lr)
      .def_readwrite("basis_seed", &AdapterConfig::basis_seed)
      .def_property(
          "placement", [](const AdapterConfig& c) { return c.placement.str(); },
          [](AdapterConfig& c, const std::string& s) { c.placement = Placement::parse(s); });

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("max_epochs", &TrainConfig::max_epochs)
      .def_readwrite("patience", &TrainConfig::patience)
      .def_readwrite("rel_tolerance", &TrainConfig::rel_tolerance)
      .def_readwrite("probe_lr", &TrainConfig::probe_lr)
      .def_readwrite("adapter_lr", &TrainConfig::adapter_lr)
      .def_readwrite("weight_decay", &TrainConfig::weight_decay)
      .def_readwrite("beta", &TrainConfig::beta)
      .def_readwrite("seed", &TrainConfig::seed);

  py::class_<SyntheticSpec>(m, "SyntheticSpec")
      .def(py::init<>())
      .def_readwrite("kind", &SyntheticSpec::kind)
      .def_readwrite("base", &SyntheticSpec::base)
      .def_readwrite("n_classes", &SyntheticSpec::n_classes)
      .def_readwrite("per_class", &SyntheticSpec::per_class)
      .def_readwrite("d", &SyntheticSpec::d)
      .def_readwrite("seq_len", &SyntheticSpec::seq_len)
      .def_readwrite("separation", &SyntheticSpec::separation)
      .def_readwrite("shift", &SyntheticSpec::shift)
      .def_readwrite("noise", &SyntheticSpec::noise)
      .def_readwrite("seed", &SyntheticSpec::seed);

  py::class_<Dataset>(m, "Dataset")
      .def_property_readonly("tokens", [](const Dataset& d) { return to_numpy(d.tokens); })
      .def_readonly("labels", &Dataset::labels)
      .def_readonly("n_classes", &Dataset::n_classes)
      .def_readonly("train", &Dataset::train)
      .def_readonly("val", &Dataset::val)
      .def_readonly("test", &Dataset::test)
      .def_readonly("spec", &Dataset::spec)
      .def("__len__", &Dataset::size);

  m.def("generate", &generate, py::arg("spec"));
  m.def("split", &split, py::arg("dataset"), py::arg("n_train"), py::arg("n_val"), py::arg("seed"));
  m.def("save_dataset", &save_dataset, py::arg("dir"), py::arg("dataset"));
  m.def("load_dataset", &load_dataset, py::arg("dir"));

  py::class_<Model>(m, "Model")
      .def_static("create", &Model::create, py::arg("backbone"), py::arg("adapter"), py::arg("seed"),
                  py::arg("backbone_seed"))
      .def_readonly("seed", &Model::seed)
      .def_property_readonly("config", [](const Model& m) { return m.config(); })
      .def_property_readonly("adapter_config", [](const Model& m) { return m.adapters.config(); })
      .def_property_readonly("merged_state", [](const Model& m) { return m.adapters.merged(); })
      .def(
          "forward",
          [](const Model& model, const Array& tokens, Mode mode, std::uint64_t seed) {
            RngStream rng(seed, streams::kEvalSampling);
            const auto res = model.forward(from_numpy(tokens), mode, mode == Mode::DetInfer ? nullptr : &rng);
            return to_numpy(res.logits);
          },
          py::arg("tokens"), py::arg("mode") = Mode::DetInfer, py::arg("seed") = 0,
          "Logits [batch x classes] for tokens [batch x seq_len x d].")
      .def("merged", &Model::merged)
      .def("clone", &Model::clone)
      .def("set_noise_scale", [](Model& m, double s) { m.adapters.set_noise_scale(s); })
      .def(
          "trainable_parameters",
          [](const Model& m) {
            py::dict out;
            for (const auto& [name, t] : m.trainable_parameters()) out[py::str(name)] = to_numpy(t);
            return out;
          })
      .def("randomize_trainable", &randomize_trainable, py::arg("seed"), py::arg("stddev") = 0.1);

  m.def("save_checkpoint", &save_checkpoint, py::arg("dir"), py::arg("model"));
  m.def("load_checkpoint", &load_checkpoint, py::arg("dir"));
  m.def("count_trainable_params", &count_trainable_params, py::arg("adapter"), py::arg("backbone"));

  m.def(
      "train",
      [](Model& model, const Dataset& ds, TrainConfig cfg) {
        // Same rule as the CLI: the adapter's beta applies unless the config sets one.
        if (cfg.beta == 0.0) cfg.beta = model.adapters.config().beta;
        return train_report_dict(train(model, ds, cfg));
      },
      py::arg("model"), py::arg("dataset"), py::arg("config"), "Trains in place; returns the report as a dict.");
  m.def(
      "evaluate",
      [](const Model& model, const Dataset& ds, const std::vector<std::size_t>& indices) {
        return evaluate_loss(model, ds, indices);
      },
      py::arg("model"), py::arg("dataset"), py::arg("indices"), "(loss, accuracy) in deterministic inference.");
  m.def(
      "gradcheck",
      [](const Model& model, const Dataset& ds, const std::vector<std::size_t>& indices, double beta,
         std::uint64_t noise_seed, double h) {
        const auto [tokens, labels] = gather(ds, indices);
        return model_gradcheck(model, tokens, labels, beta, noise_seed, h).max_rel_error;
      },
      py::arg("model"), py::arg("dataset"), py::arg("indices"), py::arg("beta") = 0.0, py::arg("noise_seed") = 0,
      py::arg("h") = 1e-4, "Largest relative error between AD and central differences.");

  m.def(
      "ece",
      [](const std::vector<double>& conf, const std::vector<std::uint8_t>& correct, std::size_t bins) {
        return ece(conf, correct, bins);
      },
      py::arg("confidences"), py::arg("correct"), py::arg("n_bins") = kDefaultCalibrationBins);
  m.def(
      "ace",
      [](const std::vector<double>& conf, const std::vector<std::uint8_t>& correct, std::size_t bins) {
        return ace(conf, correct, bins);
      },
      py::arg("confidences"), py::arg("correct"), py::arg("n_bins") = kDefaultCalibrationBins);
  m.def(
      "mann_whitney_u",
      [](const std::vector<double>& a, const std::vector<double>& b, Alternative alt) {
        const auto r = mann_whitney_u(a, b, alt);
        return py::make_tuple(r.u, r.p_value, r.exact);
      },
      py::arg("a"), py::arg("b"), py::arg("alternative") = Alternative::Less, "(U, p_value, exact)");
  m.def(
      "mc_confidence_interval",
      [](const std::vector<double>& s, double level) {
        const auto ci = mc_confidence_interval(s, level);
        return py::make_tuple(ci.mean, ci.lo, ci.hi);
      },
      py::arg("samples"), py::arg("level") = 0.95, "(mean, lo, hi)");

  m.def(
      "estimate_uncertainty",
      [](const Model& model, const Dataset& ds, const std::vector<std::size_t>& indices, std::size_t k,
         std::uint64_t seed) {
        const auto r = estimate_uncertainty(model, ds, indices, k, seed);
        py::list samples;
        for (const auto& s : r.samples) {
          py::dict d;
          d["sample_id"] = s.sample_id;
          d["maxima"] = s.maxima;
          d["std"] = s.std;
          d["correct"] = s.correct;
          d["interval"] = py::make_tuple(s.interval.lo, s.interval.hi);
          samples.append(d);
        }
        py::dict d;
        d["samples"] = samples;
        d["p_value"] = r.p_value;
        d["mean_width_correct"] = r.mean_width_correct;
        d["mean_width_incorrect"] = r.mean_width_incorrect;
        return d;
      },
      py::arg("model"), py::arg("dataset"), py::arg("indices"), py::arg("k") = 16, py::arg("seed") = 0);
  m.def(
      "ood_statistic",
      [](const Model& model, const Dataset& in_ds, const std::vector<std::size_t>& in_idx, const Dataset& out_ds,
         const std::vector<std::size_t>& out_idx, OodReduction reduction) {
        const auto r = ood_statistic(model, in_ds, in_idx, out_ds, out_idx, reduction);
        py::dict d;
        d["in"] = r.in_stat;
        d["out"] = r.out_stat;
        d["p_value"] = r.p_value;
        return d;
      },
      py::arg("model"), py::arg("in_dataset"), py::arg("in_indices"), py::arg("out_dataset"), py::arg("out_indices"),
      py::arg("reduction") = OodReduction::Mean);
}
