#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "archdoor/error.hpp"
#include "archdoor/experiment.hpp"

namespace py = pybind11;
using namespace archdoor;

namespace {

ExperimentConfig load(const std::string& path, std::optional<std::uint64_t> seed) {
  auto config = load_experiment_config(path);
  if (seed) config.seed = *seed;
  return config;
}

}  // namespace

PYBIND11_MODULE(_archdoor, m) {
  m.doc() = "Architectural backdoor harness";

  auto base = py::register_exception<Error>(m, "ArchdoorError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());

  m.def("shannon_entropy", [](const std::vector<int>& labels) { return shannon_entropy(labels); }, py::arg("labels"));
  m.def("rasr", [](const std::vector<double>& h, double t) { return rasr(h, t); }, py::arg("entropies"),
        py::arg("threshold"));
  m.def(
      "trigger_present",
      [](const std::vector<int>& tokens, const std::vector<int>& trigger) {
        return trigger_present(tokens, TriggerSpec{trigger, {}});
      },
      py::arg("tokens"), py::arg("trigger"));
  m.def(
      "detect",
      [](const std::vector<int>& tokens, const std::vector<int>& trigger, double sigma1, double sigma2) {
        return detect(std::span<const int>(tokens), TriggerSpec{trigger, {}}, sigma1, sigma2);
      },
      py::arg("tokens"), py::arg("trigger"), py::arg("sigma1") = 50.0, py::arg("sigma2") = 1.0);

  m.def(
      "config_hash", [](const std::string& path) { return config_hash(load(path, std::nullopt)); },
      py::arg("config"));
  m.def("command_names", &command_names);

  /// Runs one subcommand; returns the list of files written, relative to `out`.
  m.def(
      "run",
      [](const std::string& command, const std::string& config_path, const std::filesystem::path& out,
         std::optional<std::uint64_t> seed) {
        const auto config = load(config_path, seed);
        py::gil_scoped_release release;
        return run_command(command, config, {.out = out}).outputs;
      },
      py::arg("command"), py::arg("config"), py::arg("out"), py::arg("seed") = py::none());
}
