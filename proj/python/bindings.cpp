#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <map>
#include <string>
#include <vector>

#include "mpcal/cascade.hpp"
#include "mpcal/cli.hpp"
#include "mpcal/doe.hpp"
#include "mpcal/error.hpp"
#include "mpcal/grade.hpp"
#include "mpcal/lab.hpp"
#include "mpcal/microplane.hpp"
#include "mpcal/neural.hpp"
#include "mpcal/sensa.hpp"

namespace py = pybind11;
using namespace mpcal;

namespace {

// Missing entries take the interval midpoints; unknown names raise.
ParameterVector to_params(const std::map<std::string, double>& values) {
  ParameterVector p = Bounds().midpoint();
  for (const auto& [name, v] : values) p[param_from_name(name)] = v;
  return p;
}

std::map<std::string, double> from_params(const ParameterVector& p) {
  std::map<std::string, double> out;
  for (Param q : kAllParams) out[std::string(param_name(q))] = p[q];
  return out;
}

lab::ResponseCurve make_curve(const std::string& test, const std::vector<double>& strain,
                              const std::vector<double>& stress, const std::vector<std::string>& branch,
                              std::optional<double> confinement) {
  if (strain.size() != stress.size()) throw DataError("strain and stress lengths differ");
  if (!branch.empty() && branch.size() != strain.size()) throw DataError("branch length differs from strain");
  lab::ResponseCurve c;
  c.kind = lab::test_kind_from_name(test);
  c.confinement = confinement;
  for (std::size_t i = 0; i < strain.size(); ++i) {
    const bool unload = !branch.empty() && branch[i] == "unload";
    c.points.push_back({strain[i], stress[i], unload ? lab::Branch::Unload : lab::Branch::Load});
  }
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Microplane parameter identification core";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<ConvergenceError>(m, "ConvergenceError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());

  m.def("param_names", [] {
    std::vector<std::string> out;
    for (Param p : kAllParams) out.emplace_back(param_name(p));
    return out;
  });
  m.def("default_bounds", [] {
    std::map<std::string, std::pair<double, double>> out;
    const Bounds b;
    for (Param p : kAllParams) out[std::string(param_name(p))] = {b[p].lo, b[p].hi};
    return out;
  });
  m.def("midpoint", [] { return from_params(Bounds().midpoint()); });

  py::class_<lab::ResponseCurve>(m, "Curve")
      .def(py::init(&make_curve), py::arg("test"), py::arg("strain"), py::arg("stress"),
           py::arg("branch") = std::vector<std::string>{}, py::arg("confinement") = std::nullopt)
      .def_property_readonly("test", [](const lab::ResponseCurve& c) { return std::string(lab::test_kind_name(c.kind)); })
      .def_property_readonly("confinement", [](const lab::ResponseCurve& c) { return c.confinement; })
      .def_property_readonly("strain",
                             [](const lab::ResponseCurve& c) {
                               std::vector<double> v;
                               for (const auto& p : c.points) v.push_back(p.strain);
                               return v;
                             })
      .def_property_readonly("stress",
                             [](const lab::ResponseCurve& c) {
                               std::vector<double> v;
                               for (const auto& p : c.points) v.push_back(p.stress);
                               return v;
                             })
      .def_property_readonly("branch",
                             [](const lab::ResponseCurve& c) {
                               std::vector<std::string> v;
                               for (const auto& p : c.points) v.emplace_back(lab::branch_name(p.branch));
                               return v;
                             })
      .def("__len__", [](const lab::ResponseCurve& c) { return c.points.size(); })
      .def("feature", [](const lab::ResponseCurve& c, const std::string& label) {
        return lab::extract_feature(c, lab::FeatureSpec::parse(label));
      });

  m.def(
      "simulate",
      [](const std::string& test, const std::map<std::string, double>& params, std::optional<double> confinement) {
        const ParameterVector p = to_params(params);
        py::gil_scoped_release release;
        return lab::simulate(lab::test_kind_from_name(test), p, lab::Protocols{}, confinement);
      },
      py::arg("test"), py::arg("params") = std::map<std::string, double>{}, py::arg("confinement") = std::nullopt,
      "Default-protocol simulation of one test; parameters default to the interval midpoints.");

  m.def(
      "stress",
      [](const std::array<double, 6>& e, const std::map<std::string, double>& params) {
        const microplane::MacroTensor eps(e[0], e[1], e[2], e[3], e[4], e[5]);
        return microplane::evaluate_step(eps, to_params(params), {}).sigma.components();
      },
      py::arg("strain"), py::arg("params") = std::map<std::string, double>{},
      "Stress (xx, yy, zz, yz, xz, xy) for a strain from the virgin state.");

  m.def(
      "curve_error",
      [](const lab::ResponseCurve& measured, const lab::ResponseCurve& simulated) {
        return cascade::curve_error(measured, simulated, cascade::default_axis(measured.kind));
      },
      py::arg("measured"), py::arg("simulated"));

  m.def(
      "lhs",
      [](std::size_t n, std::size_t d, std::uint64_t seed) {
        const doe::DesignSet s = doe::lhs_sample(n, d, seed);
        std::vector<std::vector<double>> rows;
        for (std::size_t i = 0; i < n; ++i) rows.emplace_back(s.row(i).begin(), s.row(i).end());
        return rows;
      },
      py::arg("n"), py::arg("d"), py::arg("seed") = 1);

  m.def("pearson", [](const std::vector<double>& x, const std::vector<double>& y) -> std::optional<double> {
    const sensa::Correlation c = sensa::pearson(x, y);
    if (c.no_signal) return std::nullopt;
    return c.r;
  });

  m.def(
      "optimize",
      [](const std::function<double(std::vector<double>)>& f, std::vector<double> lo, std::vector<double> hi,
         std::size_t budget, std::uint64_t seed) {
        const grade::Objective obj = [&](std::span<const double> x) { return f({x.begin(), x.end()}); };
        const grade::OptimizeResult r = grade::optimize(obj, {std::move(lo), std::move(hi)}, budget, seed);
        return py::make_tuple(r.best, r.best_value, r.evals);
      },
      py::arg("f"), py::arg("lo"), py::arg("hi"), py::arg("budget") = 20000, py::arg("seed") = 1,
      "Minimizes f over the box; returns (best point, best value, evaluations).");

  m.def(
      "solve_coupled",
      [](const cascade::Relation& k4_of_k3, const cascade::Relation& k3_of_k4, std::pair<double, double> k3,
         std::pair<double, double> k4) {
        const cascade::CoupledSolution s =
            cascade::solve_coupled(k4_of_k3, k3_of_k4, {k3.first, k3.second}, {k4.first, k4.second});
        std::vector<std::pair<double, double>> roots;
        for (const auto& r : s.roots) roots.emplace_back(r.k3, r.k4);
        return py::make_tuple(s.k3, s.k4, roots);
      },
      py::arg("k4_of_k3"), py::arg("k3_of_k4"), py::arg("k3") = std::pair{5.0, 15.0},
      py::arg("k4") = std::pair{30.0, 200.0}, "Returns (k3, k4, all roots).");

  py::class_<neural::AnnModel>(m, "Model")
      .def_static("load", &neural::load_model)
      .def_readonly("target", &neural::AnnModel::target)
      .def_readonly("input_labels", &neural::AnnModel::input_labels)
      .def("predict", [](const neural::AnnModel& model, const std::vector<double>& x) { return neural::forward(model, x).value; });

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "mpcal");
        std::vector<char*> argv;
        for (std::string& a : args) argv.push_back(a.data());
        py::gil_scoped_release release;
        return cli::run(static_cast<int>(argv.size()), argv.data());
      },
      py::arg("args"), "Runs the command line tool in-process and returns its exit code.");
}
