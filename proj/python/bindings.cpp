// Python bindings for the parts of the toolkit that are handy from notebooks
// and exporter scripts: Sim(3) maps, reducers, the ANN index, token files,
// ATE and the stage driver.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "demslam/ann.hpp"
#include "demslam/config.hpp"
#include "demslam/dem.hpp"
#include "demslam/descriptor.hpp"
#include "demslam/error.hpp"
#include "demslam/eval.hpp"
#include "demslam/pipeline.hpp"
#include "demslam/sim3.hpp"

namespace py = pybind11;
using namespace demslam;
namespace fs = std::filesystem;

namespace {

Sim3 sim3_from_matrix(const Eigen::Matrix4d& m) {
  const Eigen::Matrix3d sR = m.topLeftCorner<3, 3>();
  const double s = std::cbrt(sR.determinant());
  if (!(s > 0.0)) throw Error(ErrorCode::DegenerateInput, "matrix has no positive scale");
  return {Eigen::Matrix3d(sR / s), m.topRightCorner<3, 1>(), s};
}

PipelineConfig make_config(const std::string& config_path, const std::map<std::string, std::string>& overrides) {
  PipelineConfig c = config_path.empty() ? PipelineConfig{} : load_config(config_path);
  for (const auto& [k, v] : overrides) c.set(k, v);
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_demslam, m) {
  m.doc() = "DEM-based SLAM back-end toolkit";
  // Kept alive for the interpreter's lifetime.
  static const py::handle error_type = py::exception<Error>(m, "Error", PyExc_RuntimeError).release();
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object exc = py::reinterpret_borrow<py::object>(error_type)(e.what());
      exc.attr("code") = std::string(to_string(e.code()));
      PyErr_SetObject(error_type.ptr(), exc.ptr());
    }
  });

  m.def("sim3_exp", [](const Tangent7& xi) { return sim3_exp(xi).matrix(); }, py::arg("xi"),
        "4x4 matrix of exp(xi), xi = (rho, phi, sigma).");
  m.def("sim3_log", [](const Eigen::Matrix4d& T) { return Tangent7(sim3_log(sim3_from_matrix(T))); },
        py::arg("T"));

  m.def(
      "reduce_heights",
      [](const std::vector<double>& h, const std::string& reducer, double tau) {
        return reduce_heights(h, {parse_reducer(reducer), tau});
      },
      py::arg("heights"), py::arg("reducer") = "softmax", py::arg("tau") = 0.02);

  py::class_<HnswIndex>(m, "HnswIndex")
      .def(py::init([](int dim, int M, int ef_construction, int ef_search, std::uint64_t seed) {
             IndexParams p;
             p.M = M;
             p.ef_construction = ef_construction;
             p.ef_search = ef_search;
             p.seed = seed;
             return HnswIndex(dim, p);
           }),
           py::arg("dim"), py::arg("M") = 16, py::arg("ef_construction") = 200, py::arg("ef_search") = 128,
           py::arg("seed") = 0)
      .def("insert", &HnswIndex::insert, py::arg("id"), py::arg("vector"))
      .def(
          "search",
          [](const HnswIndex& idx, const Eigen::VectorXd& q, int k, int ef) {
            std::vector<std::pair<std::uint64_t, double>> out;
            for (const auto& h : idx.search(q, k, {}, ef)) out.emplace_back(h.id, h.similarity);
            return out;
          },
          py::arg("query"), py::arg("k"), py::arg("ef") = 0)
      .def("tombstone", &HnswIndex::tombstone)
      .def("__len__", &HnswIndex::size)
      .def("__contains__", &HnswIndex::contains)
      .def_property_readonly("dim", &HnswIndex::dim)
      .def("save", &HnswIndex::save)
      .def_static("load", &HnswIndex::load);

  m.def(
      "save_tokens",
      [](const fs::path& path, const Eigen::MatrixXd& positions, const Eigen::MatrixXd& features, int patch_px) {
        if (positions.rows() != features.rows() || positions.cols() != 2) {
          throw Error(ErrorCode::DimensionMismatch, "positions must be N x 2 with one row per feature row");
        }
        std::vector<PatchToken> toks(static_cast<std::size_t>(features.rows()));
        for (Eigen::Index k = 0; k < features.rows(); ++k) {
          toks[k].position = positions.row(k).transpose();
          toks[k].feature = features.row(k).transpose();
        }
        save_tokens(path, toks, static_cast<int>(features.cols()), patch_px);
      },
      py::arg("path"), py::arg("positions"), py::arg("features"), py::arg("patch_px"),
      "Writes a DEMTOK1 token file.");
  m.def(
      "load_tokens",
      [](const fs::path& path, int expected_dim) {
        const TokenFile f = load_precomputed_tokens(path, expected_dim);
        Eigen::MatrixXd pos(f.tokens.size(), 2);
        Eigen::MatrixXd feat(f.tokens.size(), f.dim);
        for (std::size_t k = 0; k < f.tokens.size(); ++k) {
          pos.row(k) = f.tokens[k].position.transpose();
          feat.row(k) = f.tokens[k].feature.transpose();
        }
        return py::make_tuple(pos, feat, f.patch_px);
      },
      py::arg("path"), py::arg("expected_dim"), "Returns (positions, features, patch_px).");

  m.def(
      "ate_rmse",
      [](const fs::path& est, const fs::path& gt, const std::string& align, double max_dt) {
        if (align != "sim3" && align != "se3") throw Error(ErrorCode::ConfigError, "align must be sim3 or se3");
        return evaluate_ate(read_tum(est), read_tum(gt), align == "sim3", max_dt).rmse;
      },
      py::arg("est"), py::arg("gt"), py::arg("align") = "sim3", py::arg("max_dt") = 0.02);

  m.def("config_keys", &PipelineConfig::keys);
  m.def(
      "run_pipeline",
      [](const fs::path& session, const fs::path& manifest, const std::string& config_path,
         const std::map<std::string, std::string>& overrides) {
        py::gil_scoped_release release;
        Pipeline p(session, make_config(config_path, overrides));
        p.run(manifest);
      },
      py::arg("session"), py::arg("manifest"), py::arg("config") = "",
      py::arg("overrides") = std::map<std::string, std::string>{},
      "ingest through optimize, then eval when eval.gt is set.");
}
