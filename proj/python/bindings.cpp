#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "depthseq/errors.hpp"
#include "depthseq/gradcheck.hpp"
#include "depthseq/hemisplit.hpp"
#include "depthseq/pipeline.hpp"

namespace py = pybind11;
using namespace depthseq;

namespace {

// Volumes are stored x fastest, so an (H, W, D) array in Fortran order shares the layout.
template <class T>
py::array_t<T> fortran_array(const Dims& d, const T* data) {
  py::array_t<T, py::array::f_style> a({d[0], d[1], d[2]});
  std::memcpy(a.mutable_data(), data, d[0] * d[1] * d[2] * sizeof(T));
  return a;
}

template <class T>
std::vector<T> from_array(const py::array& in, Dims& dims) {
  auto a = py::array_t<T, py::array::f_style | py::array::forcecast>::ensure(in);
  if (!a || a.ndim() != 3) throw ValidationError("expected a 3-D array");
  dims = {static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
          static_cast<std::size_t>(a.shape(2))};
  return std::vector<T>(a.data(), a.data() + a.size());
}

BinaryMask mask_from(const py::array& a) {
  Dims d{};
  const auto v = from_array<std::uint8_t>(a, d);
  BinaryMask m(d);
  for (std::size_t i = 0; i < v.size(); ++i) m.bits[i] = v[i] ? 1 : 0;
  return m;
}

py::dict case_dict(const PhantomCase& c) {
  py::dict d;
  d["case_id"] = c.case_id;
  d["volume"] = c.volume;
  d["landmarks"] = c.landmarks;
  d["calc_mask"] = fortran_array(c.calc_mask.dims, c.calc_mask.bits.data());
  d["class_label"] = c.class_label ? py::cast(*c.class_label) : py::none();
  return d;
}

std::vector<std::string> ids_of(const Dataset& ds) {
  std::vector<std::string> ids;
  for (const auto& c : ds) ids.push_back(c.case_id);
  return ids;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Depth-sequence landmark localization: volumes, hemisphere split, model, training.";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_ArithmeticError);

  py::class_<Volume>(m, "Volume")
      .def(py::init([](const py::array& voxels, std::array<double, 3> spacing, std::array<double, 3> origin) {
             Geometry g;
             auto v = from_array<float>(voxels, g.dims);
             g.spacing = spacing;
             g.origin = origin;
             Volume out(g);
             out.voxels = std::move(v);
             return out;
           }),
           py::arg("voxels"), py::arg("spacing") = std::array<double, 3>{1.0, 1.0, 1.0},
           py::arg("origin") = std::array<double, 3>{0.0, 0.0, 0.0})
      .def_property_readonly("dims", [](const Volume& v) { return v.dims(); })
      .def_property_readonly("spacing", [](const Volume& v) { return v.geometry.spacing; })
      .def_property_readonly("origin", [](const Volume& v) { return v.geometry.origin; })
      .def_property_readonly("row_dir", [](const Volume& v) { return v.geometry.row_dir; })
      .def_property_readonly("col_dir", [](const Volume& v) { return v.geometry.col_dir; })
      .def("to_numpy", [](const Volume& v) { return fortran_array(v.dims(), v.voxels.data()); })
      .def("validate", [](const Volume& v) { return validate(v); })
      .def("__eq__", [](const Volume& a, const Volume& b) { return a == b; });

  m.def("load_volume", [](const std::filesystem::path& p) { return load_volume(p); });
  m.def("save_volume", [](const Volume& v, const std::filesystem::path& p) { save_volume(v, p); });

  m.def(
      "generate_phantom",
      [](std::uint64_t case_seed, std::array<std::size_t, 3> dims, std::uint64_t seed) {
        PhantomSpec s;
        s.dims = dims;
        s.seed = seed;
        return case_dict(generate_phantom(s, case_seed));
      },
      py::arg("case_seed"), py::arg("dims") = std::array<std::size_t, 3>{32, 32, 24}, py::arg("seed") = 7);
  m.def(
      "write_cohort",
      [](std::size_t count, const std::filesystem::path& out, std::array<std::size_t, 3> dims, std::uint64_t seed,
         const std::string& task) {
        PhantomSpec s;
        s.dims = dims;
        s.seed = seed;
        const CohortTask t = task == "classification" ? CohortTask::Classification : CohortTask::Localization;
        if (task != "classification" && task != "localization") throw ValidationError("unknown task " + task);
        return write_cohort(generate_cohort(s, count, t), out, t);
      },
      py::arg("count"), py::arg("out"), py::arg("dims") = std::array<std::size_t, 3>{32, 32, 24},
      py::arg("seed") = 7, py::arg("task") = "localization");

  m.def(
      "separate_hemispheres",
      [](const Volume& v, double hu_min, int connectivity) {
        HemisplitOptions o;
        o.hu_min = hu_min;
        if (connectivity != 6 && connectivity != 26) throw ValidationError("connectivity must be 6 or 26");
        o.connectivity = connectivity == 6 ? Connectivity::Six : Connectivity::TwentySix;
        SplitPlane plane;
        const HemisphereResult r = separate_hemispheres(v, o, &plane);
        py::dict d;
        d["left"] = fortran_array(r.left.dims, r.left.bits.data());
        d["right"] = fortran_array(r.right.dims, r.right.bits.data());
        d["plane_point"] = plane.point;
        d["plane_normal"] = plane.normal;
        return d;
      },
      py::arg("volume"), py::arg("hu_min") = kDefaultSkullHu, py::arg("connectivity") = 26);

  m.def(
      "assign_segments",
      [](const py::array& calc, const LandmarkSet& landmarks, const py::array& left, const py::array& right,
         bool z_increases_superior) {
        const BinaryMask c = mask_from(calc);
        const HemisphereResult h{mask_from(left), mask_from(right)};
        const LabelMask lm = assign_segments(c, landmarks, h, SegmentRule{z_increases_superior});
        return fortran_array(lm.dims, lm.labels.data());
      },
      py::arg("calc_mask"), py::arg("landmarks"), py::arg("left"), py::arg("right"),
      py::arg("z_increases_superior") = true);

  m.def("quadratic_weighted_kappa", [](const std::vector<std::vector<std::size_t>>& counts) {
    ConfusionMatrix cm(counts.size());
    for (std::size_t i = 0; i < counts.size(); ++i) {
      if (counts[i].size() != counts.size()) throw ValidationError("confusion matrix must be square");
      for (std::size_t j = 0; j < counts.size(); ++j) cm.at(i, j) = counts[i][j];
    }
    return quadratic_weighted_kappa(cm);
  });
  m.def("dice", [](const py::array& a, const py::array& b) { return dice(mask_from(a), mask_from(b)); });

  m.def(
      "estimate_flops",
      [](const std::string& config_json, std::array<std::size_t, 3> dims) {
        return to_json(estimate_flops(config_from_json(nlohmann::json::parse(config_json)), dims)).dump();
      },
      py::arg("config_json") = "{}", py::arg("dims") = std::array<std::size_t, 3>{32, 32, 24});

  py::class_<Model>(m, "Model")
      .def_property_readonly("config_json", [](const Model& mo) { return to_json(mo.config).dump(); })
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def("parameter", [](const Model& mo, const std::string& name) {
        const auto v = mo.param(name).values();
        return py::array_t<double>(static_cast<py::ssize_t>(v.size()), v.data());
      });

  m.def(
      "init_model",
      [](const std::string& config_json, std::uint64_t seed) {
        return init_model(config_from_json(nlohmann::json::parse(config_json)), seed);
      },
      py::arg("config_json") = "{}", py::arg("seed") = 0);
  m.def("load_checkpoint", [](const std::filesystem::path& p) { return load_checkpoint(p).model; });
  m.def(
      "save_checkpoint",
      [](const Model& mo, const std::filesystem::path& p, std::uint64_t seed) {
        Checkpoint c;
        c.model = mo;
        c.seed = seed;
        save_checkpoint(c, p);
      },
      py::arg("model"), py::arg("path"), py::arg("seed") = 0);

  m.def("infer", [](const Model& mo, const Volume& v) {
    const InferenceResult r = infer(mo, v);
    py::array_t<double> probs({r.probs.n, r.probs.depth});
    std::memcpy(probs.mutable_data(), r.probs.probs.data(), r.probs.probs.size() * sizeof(double));
    return py::make_tuple(r.landmarks, probs);
  });

  m.def(
      "train",
      [](const std::string& config_json, const std::string& manifest, const std::filesystem::path& checkpoint) {
        TrainConfig cfg = train_config_from_json(nlohmann::json::parse(config_json));
        const Manifest man = load_manifest(manifest);
        cfg.task = man.task == "classification" ? Task::Classification : Task::Localization;
        const Dataset ds = load_dataset(man);
        const FoldPlan plan = make_folds(ids_of(ds), cfg.k_folds, cfg.fold_seed);
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train(cfg, ds, plan.folds[cfg.fold]);
        }
        if (!checkpoint.empty()) {
          save_checkpoint(r.best, checkpoint);
          r.report.checkpoint_path = checkpoint.generic_string();
        }
        return py::make_tuple(to_json(r.report).dump(), r.best.model);
      },
      py::arg("config_json"), py::arg("manifest"), py::arg("checkpoint") = std::filesystem::path());

  m.def(
      "evaluate",
      [](const Model& mo, const std::string& manifest, std::size_t fold, std::size_t k, std::uint64_t fold_seed) {
        const Manifest man = load_manifest(manifest);
        const Dataset ds = load_dataset(man);
        const FoldPlan plan = make_folds(ids_of(ds), k, fold_seed);
        if (fold >= plan.folds.size()) throw ValidationError("fold out of range");
        const Task t = man.task == "classification" ? Task::Classification : Task::Localization;
        return to_json(evaluate(mo, t, ds, plan.folds[fold].test)).dump();
      },
      py::arg("model"), py::arg("manifest"), py::arg("fold") = 0, py::arg("k") = 5, py::arg("fold_seed") = 0);

  m.def("make_folds", [](const std::vector<std::string>& ids, std::size_t k, std::uint64_t seed) {
    return to_json(make_folds(ids, k, seed)).dump();
  }, py::arg("ids"), py::arg("k") = 5, py::arg("seed") = 0);

  m.def(
      "gradcheck",
      [](std::uint64_t seed, std::size_t shapes, double eps) {
        std::vector<GradCheckEntry> e;
        {
          py::gil_scoped_release release;
          e = run_gradcheck_suite(seed, shapes, eps);
        }
        return to_json(e).dump();
      },
      py::arg("seed") = 0, py::arg("shapes") = 10, py::arg("eps") = 1e-3);

}
