#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "kpt/checkpoint.hpp"
#include "kpt/cli.hpp"
#include "kpt/error.hpp"
#include "kpt/eval.hpp"
#include "kpt/ops.hpp"

namespace py = pybind11;
using namespace kpt;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_py(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

template <class T>
BasicTensor<T> tensor_from(const py::array_t<T, py::array::c_style | py::array::forcecast>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return BasicTensor<T>::from_data(shape, std::vector<T>(a.data(), a.data() + a.size()));
}

template <class T>
py::array_t<T> array_from(const BasicTensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<T> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::dict pose_dict(const PoseAnnotation& p) {
  py::array_t<double> joints({static_cast<py::ssize_t>(kNumJoints), py::ssize_t{3}});
  auto m = joints.mutable_unchecked<2>();
  for (std::size_t i = 0; i < kNumJoints; ++i) {
    m(i, 0) = p.joints[i].x;
    m(i, 1) = p.joints[i].y;
    m(i, 2) = p.joints[i].visible ? 1.0 : 0.0;
  }
  py::dict d;
  d["joints"] = joints;
  d["head_len"] = p.head_len;
  d["image_id"] = p.image_id;
  return d;
}

std::vector<JointId> subset_from(const std::vector<std::string>& names) {
  std::vector<JointId> out;
  for (const auto& n : names) out.push_back(joint_from_name(n));
  return out;
}

}  // namespace

PYBIND11_MODULE(_kpt, m) {
  m.doc() = "Keypoint transfer experiments on a stacked hourglass network";

  py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<InconsistentError>(m, "InconsistentError", PyExc_RuntimeError);

  m.def("joint_names", [] {
    std::vector<std::string> names;
    for (auto j : all_joints()) names.emplace_back(joint_name(j));
    return names;
  });
  m.def("builtin_split", [](const std::string& tag) { return to_py(builtin_split(tag)); }, py::arg("tag"));

  py::class_<Dataset>(m, "Dataset")
      .def_readonly("resolution", &Dataset::resolution)
      .def("__len__", &Dataset::size)
      .def("image", [](const Dataset& d, std::size_t i) {
        const auto& img = d.samples.at(i).image;
        py::array_t<float> out({img.channels, img.height, img.width});
        std::copy(img.data.begin(), img.data.end(), out.mutable_data());
        return out;
      }, py::arg("index"))
      .def("pose", [](const Dataset& d, std::size_t i) { return pose_dict(d.samples.at(i).pose); }, py::arg("index"))
      .def("save", [](const Dataset& d, const std::filesystem::path& dir) { save_dataset(d, dir); }, py::arg("dir"))
      .def("split", [](const Dataset& d, std::size_t val_count, std::uint64_t seed) {
        return split_train_val(d, val_count, seed);
      }, py::arg("val_count"), py::arg("seed"));

  m.def("generate_synthetic", &generate_synthetic, py::arg("seed"), py::arg("count"), py::arg("resolution") = 32);
  m.def("load_dataset", &load_dataset, py::arg("dir"));

  m.def("conv2d", [](const Array& x, const Array& k, const Array& b, std::size_t stride, std::size_t padding) {
    return array_from(conv2d(tensor_from<double>(x), tensor_from<double>(k), tensor_from<double>(b), stride, padding));
  }, py::arg("input"), py::arg("kernel"), py::arg("bias"), py::arg("stride") = 1, py::arg("padding") = 0);
  m.def("maxpool2", [](const Array& x) { return array_from(maxpool2(tensor_from<double>(x)).output); },
        py::arg("input"));
  m.def("upsample_nearest2", [](const Array& x) { return array_from(upsample_nearest2(tensor_from<double>(x))); },
        py::arg("input"));

  py::class_<HourglassNet>(m, "HourglassNet")
      .def_static("build", [](const py::dict& arch, std::uint64_t seed) {
        return HourglassNet::build(from_py(arch).get<HourglassArch>(), seed);
      }, py::arg("arch"), py::arg("seed"))
      .def_property_readonly("arch", [](const HourglassNet& n) { return to_py(n.arch()); })
      .def("parameter_count", &HourglassNet::parameter_count)
      .def("parameter_names", [](const HourglassNet& n) {
        std::vector<std::string> names;
        for (const auto& p : n.parameters()) names.push_back(p.name);
        return names;
      })
      .def("forward", [](HourglassNet& n, const FloatArray& x) {
        std::vector<py::array_t<float>> heads;
        for (const auto& h : n.forward(tensor_from<float>(x))) heads.push_back(array_from(h));
        return heads;
      }, py::arg("batch"))
      .def("eval", [](HourglassNet& n) { n.set_mode(NetMode::eval); })
      .def("train", [](HourglassNet& n) { n.set_mode(NetMode::train); })
      .def("save", [](const HourglassNet& n, const std::filesystem::path& p) { save_checkpoint(n, p); }, py::arg("path"))
      .def("evaluate", [](HourglassNet& n, const Dataset& d, const std::vector<std::string>& subset, double threshold,
                          const std::string& normalization) {
        MetricSpec spec{threshold, normalization_from_string(normalization), d.resolution, n.arch().heatmap_resolution};
        return to_py(evaluate_model(n, d, subset_from(subset), spec));
      }, py::arg("dataset"), py::arg("subset"), py::arg("threshold") = 0.5, py::arg("normalization") = "head");

  m.def("load_checkpoint", [](const std::filesystem::path& p) { return instantiate(load_checkpoint(p)); },
        py::arg("path"));

  m.def("pck", [](const Array& pred, const Array& gt, const Array& head_len, const std::vector<std::string>& subset,
                  double threshold, const std::string& normalization, std::size_t image_resolution,
                  std::size_t heatmap_resolution) {
    const auto ids = subset_from(subset);
    if (pred.ndim() != 3 || pred.shape(1) != static_cast<py::ssize_t>(ids.size()) || pred.shape(2) != 2)
      throw UsageError("predictions must have shape (N, len(subset), 2)");
    if (gt.ndim() != 3 || gt.shape(0) != pred.shape(0) || gt.shape(1) != static_cast<py::ssize_t>(kNumJoints) ||
        gt.shape(2) != 3)
      throw UsageError("ground truth must have shape (N, 16, 3)");
    if (head_len.ndim() != 1 || head_len.shape(0) != pred.shape(0)) throw UsageError("head_len must have shape (N,)");
    auto p = pred.unchecked<3>();
    auto g = gt.unchecked<3>();
    Predictions predictions(pred.shape(0));
    std::vector<PoseAnnotation> annotations(pred.shape(0));
    for (py::ssize_t i = 0; i < pred.shape(0); ++i) {
      for (std::size_t k = 0; k < ids.size(); ++k) predictions[i].push_back({p(i, k, 0), p(i, k, 1), 1.0});
      for (std::size_t j = 0; j < kNumJoints; ++j) annotations[i].joints[j] = {g(i, j, 0), g(i, j, 1), g(i, j, 2) != 0};
      annotations[i].head_len = head_len.at(i);
    }
    MetricSpec spec{threshold, normalization_from_string(normalization), image_resolution, heatmap_resolution};
    return to_py(pck(predictions, annotations, ids, spec));
  }, py::arg("predictions"), py::arg("ground_truth"), py::arg("head_len"), py::arg("subset"),
     py::arg("threshold") = 0.5, py::arg("normalization") = "head", py::arg("image_resolution") = 0,
     py::arg("heatmap_resolution") = 0);

  m.def("run_cli", [](const std::vector<std::string>& args) {
    std::ostringstream out, err;
    int code;
    {
      py::gil_scoped_release release;
      code = run_cli(args, out, err);
    }
    return py::make_tuple(code, out.str(), err.str());
  }, py::arg("args"), "Runs one kpt command line; returns (exit_code, stdout, stderr).");
}
