#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "oracles/stl_oracle.hpp"
#include "tdmat/commands.hpp"
#include "tdmat/config.hpp"
#include "tdmat/error.hpp"

using namespace tdmat;
namespace fs = std::filesystem;

#ifndef TDMAT_SOURCE_DIR
#error "TDMAT_SOURCE_DIR must be defined"
#endif

namespace {

const fs::path kSource = TDMAT_SOURCE_DIR;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tdmat_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

const char* kTinyConfig = R"(# small run used by the command tests
n_agents = 2
horizon = 4
embed_dim = 16
n_heads = 2
n_encoder_blocks = 1
n_value_blocks = 1
n_decoder_blocks = 1
iterations = 1
rollouts = 1
ppo_epochs = 1
verify_n = 5
eval_episodes = 2
seed = 3
)";

struct Streams {
  std::ostringstream out, err;
};

}  // namespace

TEST_CASE("config parsing") {
  const config::RunConfig c = config::parse_run_config(kTinyConfig);
  CHECK(c.game.n_agents == 2);
  CHECK(c.model.n_agents == 2);
  CHECK(c.model.obs_dim == 18);
  CHECK(c.model.horizon == 4);
  CHECK(c.train.seed == 3);
  CHECK(c.train.gamma == 0.99);
  CHECK(c.verify_n == 5);
  const config::RunConfig d = config::parse_run_config("");
  CHECK(d.game.horizon == 25);
  CHECK(d.game.n_agents == 3);
  CHECK(d.radius == 0.3);
  CHECK(d.verify_n == 2560);
  CHECK(d.confidence == 0.90);
  CHECK(d.train.rollouts == 8);
}

TEST_CASE("config errors name the line") {
  auto line_of = [](const std::string& text) -> std::size_t {
    try {
      config::parse_run_config(text);
    } catch (const ParseError& e) {
      return e.position();
    }
    FAIL("expected ParseError");
    return 0;
  };
  CHECK(line_of("horizon = 5\nbogus = 1\n") == 2);
  CHECK(line_of("horizon = 5\n\nhorizon = 6\n") == 3);
  CHECK(line_of("horizon = five\n") == 1);
  CHECK(line_of("# comment\nhorizon\n") == 2);
  CHECK(line_of("greedy = maybe\n") == 1);
  CHECK_THROWS_AS(config::parse_run_config("clip = 1.5\n"), ConfigError);
  CHECK_THROWS_AS(config::parse_run_config("embed_dim = 30\n"), ConfigError);
  CHECK_THROWS_AS(config::parse_run_config("task = task9\n"), ConfigError);
}

TEST_CASE("resolved config round trips") {
  const config::RunConfig c = config::parse_run_config(kTinyConfig);
  const std::string text = config::format_run_config(c);
  CHECK(config::format_run_config(config::parse_run_config(text)) == text);
}

TEST_CASE("spec files and task horizons") {
  const fs::path dir = scratch("spec");
  write(dir / "one.stl", "# comment\nF[0,4] dist(agent0, landmark1) < 0.2\n");
  write(dir / "long.stl", "F[0,9] dist(agent0, landmark1) < 0.2\n");
  write(dir / "ghost.stl", "F[0,2] dist(agent0, landmark7) < 0.2\n");
  auto specs_for = [&](const std::string& file) {
    config::RunConfig c = config::parse_run_config("n_agents = 2\nhorizon = 4\ntask = file\nspec_file = " + file,
                                                   dir.string());
    return config::build_specs(c);
  };
  CHECK(specs_for("one.stl").size() == 2);
  CHECK_THROWS_AS(specs_for("long.stl"), ConfigError);
  CHECK_THROWS_AS(specs_for("ghost.stl"), ConfigError);
  CHECK_THROWS_AS(specs_for("missing.stl"), IoError);
}

TEST_CASE("monitor on the golden pair") {
  const fs::path spec = kSource / "data/golden/spec.stl";
  Streams s;
  CHECK(cli::cmd_monitor(spec.string(), (kSource / "data/golden/trace_satisfied.jsonl").string(), s.out,
                         s.err) == cli::kOk);
  CHECK(s.out.str() == "robustness 0.25\nsatisfied\n");
  Streams v;
  CHECK(cli::cmd_monitor(spec.string(), (kSource / "data/golden/trace_violated.jsonl").string(), v.out,
                         v.err) == cli::kViolated);
  CHECK(v.out.str() == "robustness -1\nviolated\n");

  // The documented values agree with the brute-force oracle.
  std::ifstream in(kSource / "data/golden/trace_satisfied.jsonl");
  const stl::Trajectory tr = game::read_trace_jsonl(in);
  oracle::Trace otr;
  for (std::size_t t = 0; t < tr.size(); ++t) {
    std::vector<oracle::Point> row;
    for (const auto& p : tr.state(t)) row.push_back({p[0], p[1]});
    otr.push_back(row);
  }
  // entity order in the file: agent0, agent1, landmark0
  auto near = std::make_shared<oracle::Formula>();
  near->kind = oracle::Formula::dist;
  near->a = 0, near->b = 2, near->d = 0.5;
  auto ev = std::make_shared<oracle::Formula>();
  ev->kind = oracle::Formula::ev, ev->lo = 0, ev->hi = 3, ev->l = near;
  auto close = std::make_shared<oracle::Formula>();
  close->kind = oracle::Formula::dist;
  close->a = 0, close->b = 1, close->d = 0.1;
  auto apart = std::make_shared<oracle::Formula>();
  apart->kind = oracle::Formula::neg, apart->l = close;
  auto both = std::make_shared<oracle::Formula>();
  both->kind = oracle::Formula::conj, both->l = ev, both->r = apart;
  CHECK(*oracle::signal(both, otr, false, -10.0)[0] == 0.25);
}

TEST_CASE("monitor error codes") {
  const fs::path dir = scratch("monitor");
  write(dir / "bad.stl", "F[0,2 dist(a, b) < 1\n");
  write(dir / "trace.jsonl", "{\"t\":0,\"entities\":{\"a\":[0,0],\"b\":[1,0]}}\n");
  write(dir / "ok.stl", "F[0,5] dist(a, b) < 2\n");
  Streams s;
  CHECK(cli::cmd_monitor((dir / "bad.stl").string(), (dir / "trace.jsonl").string(), s.out, s.err) ==
        cli::kParse);
  CHECK(cli::cmd_monitor((dir / "ok.stl").string(), (dir / "nope.jsonl").string(), s.out, s.err) ==
        cli::kIo);
  // window longer than the trace
  CHECK(cli::cmd_monitor((dir / "ok.stl").string(), (dir / "trace.jsonl").string(), s.out, s.err) ==
        cli::kParse);
}

TEST_CASE("train, eval and verify round trip") {
  const fs::path dir = scratch("pipeline");
  write(dir / "run.conf", kTinyConfig);
  Streams s;
  CHECK(cli::cmd_train({(dir / "missing.conf").string(), {}, {}}, s.out, s.err) == cli::kIo);
  write(dir / "broken.conf", "horizon = 4\nwhat = 1\n");
  CHECK(cli::cmd_train({(dir / "broken.conf").string(), {}, {}}, s.out, s.err) == cli::kParse);
  write(dir / "invalid.conf", "clip = 2\n");
  CHECK(cli::cmd_train({(dir / "invalid.conf").string(), {}, {}}, s.out, s.err) == cli::kUsage);

  REQUIRE(cli::cmd_train({(dir / "run.conf").string(), {}, (dir / "a").string()}, s.out, s.err) == cli::kOk);
  const std::string metrics = read(dir / "a/metrics.csv");
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 2);
  CHECK(fs::exists(dir / "a/final.ckpt"));

  // re-running the resolved snapshot reproduces the metrics
  REQUIRE(cli::cmd_train({(dir / "a/config.resolved.txt").string(), {}, (dir / "b").string()}, s.out,
                         s.err) == cli::kOk);
  CHECK(read(dir / "b/metrics.csv") == metrics);

  cli::VerifyOptions vo;
  vo.checkpoint = (dir / "a/final.ckpt").string();
  vo.n = 1;
  vo.out = (dir / "v1").string();
  REQUIRE(cli::cmd_verify(vo, s.out, s.err) == cli::kOk);
  const auto report = nlohmann::json::parse(read(dir / "v1/verify_report.json"));
  CHECK(report["trials"] == 1);
  CHECK(report["half_width"] == 0.0);
  vo.out = (dir / "v2").string();
  REQUIRE(cli::cmd_verify(vo, s.out, s.err) == cli::kOk);
  CHECK(read(dir / "v1/verify_report.json") == read(dir / "v2/verify_report.json"));

  cli::VerifyOptions random;
  random.random = true;
  random.config = (dir / "run.conf").string();
  random.out = (dir / "vr").string();
  CHECK(cli::cmd_verify(random, s.out, s.err) == cli::kOk);
  CHECK(nlohmann::json::parse(read(dir / "vr/verify_report.json"))["policy"] == "uniform_random");

  cli::EvalOptions eo;
  eo.checkpoint = (dir / "a/final.ckpt").string();
  eo.out = (dir / "traces").string();
  Streams e;
  REQUIRE(cli::cmd_eval(eo, e.out, e.err) == cli::kOk);
  int files = 0;
  for (const auto& entry : fs::directory_iterator(dir / "traces")) files += entry.is_regular_file() ? 1 : 0;
  CHECK(files == 2);

  // printed robustness values are recomputable from the traces
  const config::RunConfig cfg = config::parse_run_config(kTinyConfig);
  const stl::Spec joint = stl::conjoin(config::build_specs(cfg));
  std::istringstream lines(e.out.str());
  for (int k = 0; k < 2; ++k) {
    std::string name, label;
    double rho = 0.0;
    lines >> name >> label >> rho;
    std::string verdict;
    lines >> verdict;
    std::ifstream in(dir / "traces" / name);
    const stl::Trajectory tr = game::read_trace_jsonl(in);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", stl::robustness(joint, tr, 0));
    CHECK(e.out.str().find(name + "  robustness " + buf) != std::string::npos);
  }

  // greedy evaluation is deterministic per seed
  eo.greedy = true;
  eo.out = (dir / "g1").string();
  REQUIRE(cli::cmd_eval(eo, e.out, e.err) == cli::kOk);
  eo.out = (dir / "g2").string();
  REQUIRE(cli::cmd_eval(eo, e.out, e.err) == cli::kOk);
  CHECK(read(dir / "g1/episode_0000.jsonl") == read(dir / "g2/episode_0000.jsonl"));
}

TEST_CASE("checkpoint problems map to their exit code") {
  const fs::path dir = scratch("ckpt");
  write(dir / "run.conf", kTinyConfig);
  Streams s;
  REQUIRE(cli::cmd_train({(dir / "run.conf").string(), {}, (dir / "a").string()}, s.out, s.err) == cli::kOk);
  std::string bytes = read(dir / "a/final.ckpt");
  bytes[bytes.size() / 2] ^= 0x01;
  write(dir / "corrupt.ckpt", bytes);
  cli::VerifyOptions vo;
  vo.checkpoint = (dir / "corrupt.ckpt").string();
  vo.out = dir.string();
  CHECK(cli::cmd_verify(vo, s.out, s.err) == cli::kCheckpoint);
  vo.checkpoint = (dir / "absent.ckpt").string();
  CHECK(cli::cmd_verify(vo, s.out, s.err) == cli::kIo);
  cli::EvalOptions eo;
  eo.checkpoint = (dir / "corrupt.ckpt").string();
  CHECK(cli::cmd_eval(eo, s.out, s.err) == cli::kCheckpoint);
}
