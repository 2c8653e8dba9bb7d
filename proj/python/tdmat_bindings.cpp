#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "tdmat/commands.hpp"
#include "tdmat/error.hpp"
#include "tdmat/game.hpp"
#include "tdmat/statverify.hpp"
#include "tdmat/stl.hpp"

namespace py = pybind11;
using namespace tdmat;

namespace {

stl::Trajectory make_trajectory(std::vector<std::string> names,
                                const std::vector<std::vector<stl::Vec2>>& states) {
  stl::Trajectory t(std::move(names));
  for (const auto& s : states) t.push_state(s);
  return t;
}

// Runs a command, returning (exit code, stdout text, stderr text).
template <typename Fn>
py::tuple run(Fn&& fn) {
  std::ostringstream out, err;
  int code;
  {
    py::gil_scoped_release release;
    code = fn(out, err);
  }
  return py::make_tuple(code, out.str(), err.str());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Temporal-logic multi-agent transformer: STL monitor, game, training and verification";

  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<TraceError>(m, "TraceError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  py::class_<stl::Spec>(m, "Spec")
      .def_property_readonly("horizon", &stl::Spec::horizon)
      .def("__str__", [](const stl::Spec& s) { return stl::to_string(s); })
      .def("__repr__", [](const stl::Spec& s) { return "Spec(" + stl::to_string(s) + ")"; })
      .def("__eq__", [](const stl::Spec& a, const stl::Spec& b) { return a == b; });

  py::class_<stl::Trajectory>(m, "Trajectory")
      .def(py::init(&make_trajectory), py::arg("entity_names"), py::arg("states"),
           "states[t][k] is the (x, y) position of entity k at time t")
      .def("__len__", &stl::Trajectory::size)
      .def_property_readonly("entity_names", &stl::Trajectory::entity_names)
      .def("state", &stl::Trajectory::state);

  m.def("parse_spec", [](const std::string& text) { return stl::parse_spec(text); }, py::arg("text"));
  m.def("conjoin", [](const std::vector<stl::Spec>& specs) { return stl::conjoin(specs); });
  m.def("robustness",
        [](const stl::Spec& s, const stl::Trajectory& t, std::size_t time) {
          return stl::robustness(s, t, time);
        },
        py::arg("spec"), py::arg("trajectory"), py::arg("t") = 0);
  m.def("evaluate",
        [](const stl::Spec& s, const stl::Trajectory& t, std::size_t time) {
          return stl::evaluate_boolean(s, t, time);
        },
        py::arg("spec"), py::arg("trajectory"), py::arg("t") = 0);
  m.def("prefix_robustness",
        [](const stl::Spec& s, const stl::Trajectory& t, double floor) {
          return stl::prefix_robustness(s, t, floor);
        },
        py::arg("spec"), py::arg("trajectory"), py::arg("floor") = stl::kDefaultRobustnessFloor);

  py::class_<game::GameSpec>(m, "GameSpec")
      .def(py::init([](int n_agents, int horizon) {
             game::GameSpec g;
             g.n_agents = n_agents;
             g.horizon = horizon;
             return g;
           }),
           py::arg("n_agents") = 3, py::arg("horizon") = 25)
      .def_readwrite("n_agents", &game::GameSpec::n_agents)
      .def_readwrite("horizon", &game::GameSpec::horizon)
      .def_readwrite("gamma", &game::GameSpec::gamma)
      .def_property_readonly("observation_width", &game::GameSpec::observation_width);

  py::class_<game::WorldState>(m, "WorldState")
      .def_readonly("agent_pos", &game::WorldState::agent_pos)
      .def_readonly("agent_vel", &game::WorldState::agent_vel)
      .def_readonly("landmark_pos", &game::WorldState::landmark_pos)
      .def_readonly("step", &game::WorldState::step)
      .def("__eq__", [](const game::WorldState& a, const game::WorldState& b) { return a == b; });

  m.def("reset", &game::reset, py::arg("game"), py::arg("seed"));
  m.def("step",
        [](const game::GameSpec& g, const game::WorldState& s, const std::vector<int>& actions) {
          return game::step(g, s, actions);
        },
        py::arg("game"), py::arg("state"), py::arg("actions"));
  m.def("done", &game::done);
  m.def("observe", &game::observe);
  m.def("entity_names", &game::entity_names);
  m.def("entity_positions", &game::entity_positions);
  m.def("build_task_1", &game::build_task_1, py::arg("n_agents"), py::arg("window") = 25,
        py::arg("radius") = game::kLandmarkRadius);
  m.def("build_task_2", &game::build_task_2, py::arg("n_agents"), py::arg("window") = 25,
        py::arg("radius") = game::kLandmarkRadius);
  m.def("build_reach_task", &game::build_reach_task, py::arg("n_agents"), py::arg("window"),
        py::arg("radius") = game::kLandmarkRadius);

  m.def("z_value", &verify::z_value, py::arg("confidence"));
  m.def("wald_interval",
        [](long x, long n, double confidence) {
          const verify::Interval i = verify::wald_interval(x, n, confidence);
          return py::make_tuple(i.lo, i.hi, i.half_width);
        },
        py::arg("successes"), py::arg("trials"), py::arg("confidence") = 0.90,
        "(lo, hi, half_width)");

  m.def("cmd_train",
        [](const std::string& config, std::optional<std::string> out,
           std::optional<std::uint64_t> seed) {
          cli::TrainOptions o{config, seed, out};
          return run([&](std::ostream& a, std::ostream& b) { return cli::cmd_train(o, a, b); });
        },
        py::arg("config"), py::arg("out") = py::none(), py::arg("seed") = py::none());
  m.def("cmd_verify",
        [](const std::string& checkpoint, const std::string& config, bool random,
           std::optional<long> n, std::optional<double> confidence,
           std::optional<std::uint64_t> seed, std::optional<std::string> out,
           std::optional<bool> greedy) {
          cli::VerifyOptions o{checkpoint, config, random, n, confidence, seed, out, greedy};
          return run([&](std::ostream& a, std::ostream& b) { return cli::cmd_verify(o, a, b); });
        },
        py::arg("checkpoint") = "", py::arg("config") = "", py::arg("random") = false,
        py::arg("n") = py::none(), py::arg("confidence") = py::none(),
        py::arg("seed") = py::none(), py::arg("out") = py::none(), py::arg("greedy") = py::none());
  m.def("cmd_eval",
        [](const std::string& checkpoint, std::optional<int> episodes,
           std::optional<std::uint64_t> seed, std::optional<std::string> out,
           std::optional<bool> greedy) {
          cli::EvalOptions o{checkpoint, episodes, seed, out, greedy};
          return run([&](std::ostream& a, std::ostream& b) { return cli::cmd_eval(o, a, b); });
        },
        py::arg("checkpoint"), py::arg("episodes") = py::none(), py::arg("seed") = py::none(),
        py::arg("out") = py::none(), py::arg("greedy") = py::none());
  m.def("cmd_monitor",
        [](const std::string& spec, const std::string& trace) {
          return run([&](std::ostream& a, std::ostream& b) {
            return cli::cmd_monitor(spec, trace, a, b);
          });
        },
        py::arg("spec"), py::arg("trace"));
}
