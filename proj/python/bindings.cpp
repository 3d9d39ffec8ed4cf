#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "commands.hpp"
#include "vitbench/aggregate.hpp"
#include "vitbench/error.hpp"
#include "vitbench/metrics.hpp"
#include "vitbench/model.hpp"
#include "vitbench/volume.hpp"

namespace py = pybind11;
using namespace vitbench;

namespace {

py::dict roc_dict(const RocResult& r) {
  py::dict d;
  d["auc"] = r.auc;
  d["variance"] = r.variance;
  d["ci"] = py::make_tuple(r.ci_lo, r.ci_hi);
  d["n_pos"] = r.n_pos;
  d["n_neg"] = r.n_neg;
  py::list pts;
  for (const auto& p : r.points) pts.append(py::make_tuple(p.fpr, p.tpr));
  d["points"] = pts;
  return d;
}

}  // namespace

PYBIND11_MODULE(_vitbench, m) {
  m.doc() = "Bindings for the vitbench C++ core";

  py::register_exception<Error>(m, "Error");

  m.def("auc", [](std::vector<double> scores, std::vector<int> labels) { return auc({scores, labels}); },
        py::arg("scores"), py::arg("labels"));
  m.def("delong_ci",
        [](std::vector<double> scores, std::vector<int> labels, double alpha) {
          return roc_dict(delong_ci({scores, labels}, alpha));
        },
        py::arg("scores"), py::arg("labels"), py::arg("alpha") = 0.05);
  m.def("delong_paired_test",
        [](std::vector<double> a, std::vector<double> b, std::vector<int> labels) {
          const auto t = delong_paired_test(a, b, labels);
          return py::dict(py::arg("auc_a") = t.auc_a, py::arg("auc_b") = t.auc_b, py::arg("z") = t.z,
                          py::arg("p") = t.p_two_sided);
        },
        py::arg("a"), py::arg("b"), py::arg("labels"));
  m.def("top_count", &top_count, py::arg("n"), py::arg("fraction") = kTopFraction);
  m.def("patient_score_top_fraction",
        [](std::vector<double> scores, double fraction) {
          return patient_score_top_fraction({"patient", std::move(scores)}, fraction);
        },
        py::arg("scores"), py::arg("fraction") = kTopFraction);

  m.def("read_volume",
        [](const std::filesystem::path& path) {
          const Volume3D v = read_volume(path);
          const auto d = v.dims();
          py::array_t<float> arr({d[0], d[1], d[2]});
          std::copy(v.voxels().begin(), v.voxels().end(), arr.mutable_data());
          const auto s = v.spacing();
          return py::make_tuple(arr, py::make_tuple(s[0], s[1], s[2]), to_string(v.domain()));
        },
        py::arg("path"), "Returns (array[z, y, x], spacing_mm, domain).");

  m.def("gradcheck",
        [](std::size_t c1, std::size_t c2, double eps, std::uint64_t seed) {
          GradcheckOptions o;
          o.c1 = c1;
          o.c2 = c2;
          o.eps = eps;
          o.seed = seed;
          const auto r = gradcheck(o);
          py::dict groups;
          for (const auto& g : r.groups) groups[py::str(g.name)] = g.max_rel_error;
          return py::dict(py::arg("max_rel_error") = r.max_rel_error, py::arg("checked") = r.checked,
                          py::arg("groups") = groups);
        },
        py::arg("c1") = 2, py::arg("c2") = 4, py::arg("eps") = 1e-5, py::arg("seed") = 0);

  m.def("run_cli",
        [](std::vector<std::string> args) {
          std::ostringstream out, err;
          int code = 0;
          {
            py::gil_scoped_release release;
            code = cli::run_cli(args, out, err);
          }
          return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs the vitbench CLI in-process; returns (exit_code, stdout, stderr).");
}
