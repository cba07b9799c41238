#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "voxlrp/error.hpp"
#include "voxlrp/kernels.hpp"
#include "voxlrp/lrp.hpp"
#include "voxlrp/metrics.hpp"
#include "voxlrp/model.hpp"
#include "voxlrp/pipeline.hpp"
#include "voxlrp/preprocess.hpp"
#include "voxlrp/server.hpp"
#include "voxlrp/volume.hpp"

namespace py = pybind11;
using namespace voxlrp;
using nlohmann::json;

namespace {

using F32 = py::array_t<float, py::array::c_style | py::array::forcecast>;
using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;

// Volumes cross the boundary as (nz, ny, nx) arrays, which is the x-fastest layout.
py::array_t<float> to_array(const Volume3D& v) {
  const Dims d = v.dims();
  py::array_t<float> a({py::ssize_t(d.nz), py::ssize_t(d.ny), py::ssize_t(d.nx)});
  std::copy(v.values().begin(), v.values().end(), a.mutable_data());
  return a;
}

Volume3D to_volume(const F32& a) {
  if (a.ndim() != 3) throw py::value_error("volume must be a 3-d array (nz, ny, nx)");
  const Dims d{std::uint32_t(a.shape(2)), std::uint32_t(a.shape(1)), std::uint32_t(a.shape(0))};
  return Volume3D(d, std::vector<float>(a.data(), a.data() + a.size()));
}

TensorD to_tensor(const F64& a) {
  Shape s(a.shape(), a.shape() + a.ndim());
  return TensorD(s, std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> from_tensor(const TensorD& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> a(shape);
  std::copy(t.data().begin(), t.data().end(), a.mutable_data());
  return a;
}

std::vector<double> to_vec(const F64& a) { return {a.data(), a.data() + a.size()}; }

LrpConfig lrp_config(double alpha, double beta, double epsilon) {
  LrpConfig c;
  c.alpha = alpha;
  c.beta = beta;
  c.epsilon = epsilon;
  c.validate();
  return c;
}

json run_stage(const std::string& stage, const std::string& config) {
  const PipelineConfig c = config_from_json(json::parse(config));
  if (stage == "synth") return run_synth(c);
  if (stage == "residualize") return run_residualize(c);
  if (stage == "split") return run_split(c);
  if (stage == "train") return run_train(c);
  if (stage == "cv") return run_cv_stage(c);
  if (stage == "explain") return run_explain(c);
  if (stage == "metrics") return run_metrics(c);
  fail(ErrorCode::InvalidArgument, "unknown stage " + stage);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  static py::exception<Error> exc(m, "VoxlrpError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(exc, (std::string(to_string(e.code())) + ": " + e.what()).c_str());
    }
  });

  m.def("read_volume", [](const std::filesystem::path& p) { return to_array(read_volume(p)); });
  m.def("write_volume", [](const std::filesystem::path& p, const F32& a) { write_volume(to_volume(a), p); });
  m.def("shift_volume", [](const F32& a, int dx, int dy, int dz) { return to_array(shift_volume(to_volume(a), dx, dy, dz)); });

  m.def("conv3d", [](const F64& x, const F64& k, const F64& b) { return from_tensor(conv3d(to_tensor(x), to_tensor(k), to_tensor(b))); });
  m.def("maxpool3d", [](const F64& x) {
    const auto r = maxpool3d(to_tensor(x));
    return py::make_tuple(from_tensor(r.output), r.argmax);
  });

  m.def("lrp_dense",
        [](const F64& x, const F64& w, const F64& upper, double alpha, double beta, double epsilon) {
          const auto r = lrp_dense(to_vec(x), to_vec(w), to_vec(upper), lrp_config(alpha, beta, epsilon));
          return py::make_tuple(r.lower, r.absorbed);
        },
        py::arg("x"), py::arg("weights"), py::arg("upper"), py::arg("alpha") = 1.0, py::arg("beta") = 0.0,
        py::arg("epsilon") = 1e-9);

  m.def("dice", [](py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> a,
                   py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> b) {
    auto mask = [](const auto& x) {
      return BinaryMask(Dims{std::uint32_t(x.size()), 1, 1}, std::vector<std::uint8_t>(x.data(), x.data() + x.size()));
    };
    if (a.size() != b.size()) throw py::value_error("dice: masks differ in size");
    return dice(mask(a), mask(b));
  });
  m.def("pearson", [](const F64& x, const F64& y) { return pearson(to_vec(x), to_vec(y)).rho; });
  m.def("roc_auc", [](const F64& s, const std::vector<int>& t) { return roc_auc(to_vec(s), t); });

  m.def("count_parameters", [](const std::string& spec) {
    const ParameterCount pc = count_parameters(spec_from_json(json::parse(spec)));
    return py::make_tuple(pc.trainable, pc.non_trainable);
  });

  m.def("run_stage", [](const std::string& stage, const std::string& config) { return run_stage(stage, config).dump(); });

  py::class_<TrainedModel>(m, "Model")
      .def_static("load", [](const std::filesystem::path& p) { return load_model(p); })
      .def_static("build", [](const std::string& spec, std::uint64_t seed) { return build_model(spec_from_json(json::parse(spec)), seed); })
      .def("save", [](const TrainedModel& self, const std::filesystem::path& p) { save_model(self, p); })
      .def_property_readonly("spec", [](const TrainedModel& self) { return spec_to_json(self.spec).dump(); })
      .def("logits", [](const TrainedModel& self, const F32& v) { return predict_logits(self, to_volume(v)); })
      .def(
          "relevance",
          [](const TrainedModel& self, const F32& v, int target, double alpha, double beta, double epsilon) {
            const RelevanceMap r = lrp_relevance(self, to_volume(v), target, lrp_config(alpha, beta, epsilon));
            py::array_t<double> a({py::ssize_t(r.dims.nz), py::ssize_t(r.dims.ny), py::ssize_t(r.dims.nx)});
            std::copy(r.values.begin(), r.values.end(), a.mutable_data());
            return py::make_tuple(a, r.logit);
          },
          py::arg("volume"), py::arg("target") = 1, py::arg("alpha") = 1.0, py::arg("beta") = 0.0,
          py::arg("epsilon") = 1e-9);

  py::class_<ApiService>(m, "ApiService")
      .def(py::init<const std::filesystem::path&, const std::filesystem::path&>())
      .def("get", [](const ApiService& self, const std::string& path, const std::map<std::string, std::string>& q) {
        const ApiResponse r = self.get(path, q);
        return py::make_tuple(r.status, r.body);
      }, py::arg("path"), py::arg("query") = std::map<std::string, std::string>{});
}
