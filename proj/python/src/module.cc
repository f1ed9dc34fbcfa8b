#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "edgefl/errors.h"
#include "edgefl/lowrank.h"
#include "edgefl/metrics.h"
#include "edgefl/scenario.h"
#include "edgefl/verify.h"

namespace py = pybind11;
using namespace edgefl;

namespace {

scenario::ScenarioConfig parse(const std::string& config_json) {
  auto c = scenario::config_from_json(config_json);
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_edgefl, m) {
  auto base = py::register_exception<Error>(m, "EdgeflError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ProtocolError>(m, "ProtocolError", base.ptr());

  m.def("svd", [](const Eigen::MatrixXd& a) {
    auto r = lowrank::svd(a);
    return py::make_tuple(r.left, r.singular_values, r.right);
  }, py::arg("matrix"));

  m.def("frechet_2d",
        py::overload_cast<const Eigen::MatrixXd&, const Eigen::MatrixXd&>(&metrics::frechet_2d),
        py::arg("a"), py::arg("b"));
  m.def("neutrality_score", &metrics::neutrality_score, py::arg("latents"));

  m.def("normalize_config", [](const std::string& text) {
    return scenario::config_to_json(parse(text));
  }, py::arg("config_json"));

  m.def("run", [](const std::string& text) {
    const auto config = parse(text);
    py::gil_scoped_release unlocked;
    return scenario::run_scenario(config).report_json;
  }, py::arg("config_json"));

  m.def("sweep", [](const std::string& text, const std::vector<std::uint64_t>& seeds) {
    const auto config = parse(text);
    py::gil_scoped_release unlocked;
    return scenario::sweep(config, seeds).summary_csv;
  }, py::arg("config_json"), py::arg("seeds"));

  m.def("report", &scenario::report, py::arg("run_dir"));

  m.def("verify", [](const std::vector<int>& only, const std::vector<std::uint64_t>& seeds,
                     const std::filesystem::path& work_dir) {
    verify::Options options;
    options.only = only;
    options.seeds = seeds;
    options.work_dir = work_dir;
    std::vector<verify::CheckResult> results;
    {
      py::gil_scoped_release unlocked;
      results = verify::run(options);
    }
    py::list out;
    for (const auto& r : results) {
      py::dict d;
      d["id"] = r.id;
      d["name"] = r.name;
      d["passed"] = r.passed;
      d["detail"] = r.detail;
      d["seconds"] = r.seconds;
      d["line"] = r.line();
      out.append(d);
    }
    return out;
  }, py::arg("only"), py::arg("seeds"), py::arg("work_dir"));
}
