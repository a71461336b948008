// SPDX-License-Identifier: Apache-2.0
//
// Python bindings for the retention kernels, returns-to-go, metrics, the
// simulator and the command-line driver.

#include "maskrdt/commands.hpp"
#include "maskrdt/metrics.hpp"
#include "maskrdt/retention.hpp"
#include "maskrdt/simulator.hpp"
#include "maskrdt/trajectory.hpp"

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>
#include <string>
#include <vector>

namespace py = pybind11;
using namespace maskrdt;

namespace {

using RowMat = Mat<double>;

RowMat run_retention(const RowMat& q, const RowMat& k, const RowMat& v, double alpha, const std::string& mode,
                     std::size_t segment_len) {
  switch (parse_mode(mode)) {
    case RetentionMode::recurrent: {
      RetentionState<double> state;
      return retention_recurrent(q, k, v, alpha, state);
    }
    case RetentionMode::parallel:
      return retention_parallel(q, k, v, alpha);
    case RetentionMode::chunkwise:
      return retention_chunkwise(q, k, v, alpha, segment_len == 0 ? static_cast<std::size_t>(q.rows()) : segment_len);
  }
  throw std::invalid_argument("unknown mode");
}

py::dict rollout_summary(const std::string& policy, std::size_t episodes, std::uint64_t seed, double eps,
                         const SimConfig& cfg) {
  const auto items = ItemCatalog::generate(cfg);
  Policy p;
  if (policy == "oracle") {
    p = make_oracle_policy(eps);
  } else if (policy == "uniform") {
    p = make_uniform_policy();
  } else {
    throw std::invalid_argument("policy must be 'oracle' or 'uniform'");
  }
  RolloutResult r;
  {
    py::gil_scoped_release release;
    r = rollout(p, cfg, items, episodes, seed);
  }
  py::list actions, rewards;
  for (const auto& tr : r.trajectories) {
    std::vector<std::size_t> a;
    std::vector<double> rw;
    for (const auto& s : tr.steps()) {
      a.push_back(s.action);
      rw.push_back(s.reward);
    }
    actions.append(py::cast(a));
    rewards.append(py::cast(rw));
  }
  py::dict out;
  out["ctr"] = r.ctr;
  out["mean_ctr"] = r.mean_ctr;
  out["std_ctr"] = r.std_ctr;
  out["actions"] = actions;
  out["rewards"] = rewards;
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Masked retention decision model: core kernels and tools";

  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<DatasetError>(m, "DatasetError", PyExc_ValueError);

  m.def("alpha_schedule", &alpha_schedule, py::arg("heads"), "Per-head decay rates 1 - 2^(-5-j).");
  m.def("rotation_angles", &rotation_angles, py::arg("head_dim"), py::arg("base") = 10000.0);
  m.def("decay_mask", [](double alpha, std::size_t size) { return decay_mask<double>(alpha, size); },
        py::arg("alpha"), py::arg("size"));
  m.def("retention", &run_retention, py::arg("q"), py::arg("k"), py::arg("v"), py::arg("alpha"),
        py::arg("mode") = "parallel", py::arg("segment_len") = 0,
        "Single-head retention over rows of q, k, v in the given mode.");

  m.def("compute_rtg",
        [](const std::vector<double>& rewards, double gamma) { return compute_rtg(rewards, gamma); },
        py::arg("rewards"), py::arg("gamma") = 1.0);

  m.def("ctr", &ctr, py::arg("episode_return"), py::arg("episode_length"), py::arg("r_max") = 1.0);
  m.def(
      "topk_metrics",
      [](const std::vector<std::vector<double>>& logits, const std::vector<std::size_t>& truth, std::size_t k) {
        if (logits.size() != truth.size()) throw DimensionError("topk_metrics: logits and truth lengths differ");
        std::vector<RankingExample> ex;
        for (std::size_t i = 0; i < logits.size(); ++i) ex.push_back({logits[i], truth[i]});
        const auto r = topk_metrics(ex, k);
        py::dict out;
        out["recall"] = r.recall;
        out["precision"] = r.precision;
        out["ndcg"] = r.ndcg;
        return out;
      },
      py::arg("logits"), py::arg("truth"), py::arg("k"));

  py::class_<SimConfig>(m, "SimConfig")
      .def(py::init<>())
      .def_readwrite("state_dim", &SimConfig::state_dim)
      .def_readwrite("catalog", &SimConfig::catalog)
      .def_readwrite("episode_len", &SimConfig::episode_len)
      .def_readwrite("drift", &SimConfig::drift)
      .def_readwrite("noise", &SimConfig::noise)
      .def_readwrite("obs_noise", &SimConfig::obs_noise)
      .def_readwrite("sharpness", &SimConfig::sharpness)
      .def_readwrite("history_decay", &SimConfig::history_decay)
      .def_readwrite("r_max", &SimConfig::r_max)
      .def_readwrite("seed", &SimConfig::seed)
      .def("validate", &SimConfig::validate);

  m.def("rollout", &rollout_summary, py::arg("policy"), py::arg("episodes"), py::arg("seed") = 0,
        py::arg("eps") = 0.1, py::arg("config") = SimConfig{},
        "Roll out the 'oracle' or 'uniform' policy in the simulator.");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli_main(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run a maskrdt subcommand; returns (exit_code, stdout, stderr).");
}
