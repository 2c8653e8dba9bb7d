#include "tdmat/commands.hpp"

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <sstream>

#include "json.hpp"

#include "tdmat/autodiff.hpp"
#include "tdmat/config.hpp"
#include "tdmat/error.hpp"
#include "tdmat/statverify.hpp"
#include "tdmat/trainer.hpp"

namespace tdmat::cli {

namespace fs = std::filesystem;

namespace {

// Shortest text that reads back to the same double.
std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string hex(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const train::TrainingError& e) {
    err << "training failed: " << e.what() << '\n';
    return kTraining;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << '\n';
    return kIo;
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << '\n';
    return kParse;
  } catch (const TraceError& e) {
    err << "trace error: " << e.what() << '\n';
    return kParse;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kCheckpoint;
  } catch (const std::invalid_argument& e) {
    err << "invalid argument: " << e.what() << '\n';
    return kUsage;
  } catch (const std::domain_error& e) {
    err << "invalid argument: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kInternal;
  }
}

void make_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f || !(f << text) || !f.flush()) throw IoError("cannot write " + path.string());
}

void save(const fs::path& path, const model::TdmatPolicy& policy, const config::RunConfig& cfg) {
  try {
    ad::save_checkpoint(path.string(), policy.params(), config::format_run_config(cfg));
  } catch (const CheckpointError& e) {
    throw IoError(e.what());
  }
}

/// Hash of the parameters and architecture; independent of paths in the
/// stored run configuration.
std::string checkpoint_id(const model::TdmatPolicy& policy) {
  std::ostringstream s;
  ad::save_checkpoint(s, policy.params(), policy.config().fingerprint());
  const std::string bytes = s.str();
  return hex(ad::fnv1a(std::span(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size())));
}

struct Loaded {
  config::RunConfig config;
  model::TdmatPolicy policy;
};

Loaded load_policy(const std::string& path) {
  if (!fs::exists(path)) throw IoError("checkpoint not found: " + path);
  ad::Checkpoint ck = ad::load_checkpoint(path);
  config::RunConfig cfg;
  try {
    cfg = config::parse_run_config(ck.metadata);
  } catch (const Error& e) {
    throw CheckpointError(std::string("checkpoint carries an invalid run configuration: ") + e.what());
  }
  model::TdmatPolicy policy(cfg.model, std::move(ck.params));
  return {cfg, std::move(policy)};
}

}  // namespace

int cmd_train(const TrainOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (!fs::exists(o.config)) throw IoError("config file not found: " + o.config);
    config::RunConfig cfg = config::load_run_config(o.config);
    if (o.seed) cfg.seed = *o.seed;
    if (o.out) cfg.out_dir = *o.out;
    cfg.finalize();
    const auto specs = config::build_specs(cfg);
    const fs::path dir(cfg.out_dir);
    make_dir(dir.string());
    write_file(dir / "config.resolved.txt", config::format_run_config(cfg));

    std::ofstream metrics(dir / "metrics.csv", std::ios::binary);
    if (!metrics) throw IoError("cannot write " + (dir / "metrics.csv").string());
    metrics << train::metrics_csv_header() << '\n';

    model::TdmatPolicy policy(cfg.model, cfg.seed);
    auto hook = [&](const train::IterationMetrics& m, const model::TdmatPolicy& p) {
      metrics << train::metrics_csv_row(m) << '\n';
      metrics.flush();
      out << "iteration " << m.iteration << " steps " << m.env_steps << " robustness "
          << m.mean_robustness << " satisfied " << m.satisfaction_rate << " loss_enc_v "
          << m.loss_enc_v << " loss_dec " << m.loss_dec << std::endl;
      if (cfg.checkpoint_every > 0 && (m.iteration + 1) % cfg.checkpoint_every == 0) {
        char name[64];
        std::snprintf(name, sizeof name, "checkpoint_%04d.ckpt", m.iteration + 1);
        save(dir / name, p, cfg);
      }
    };
    try {
      train::TrainResult result = train::train(cfg.game, specs, std::move(policy), cfg.train, hook);
      save(dir / "final.ckpt", result.policy, cfg);
      out << "wrote " << (dir / "final.ckpt").string() << '\n';
    } catch (const train::TrainingError& e) {
      model::TdmatPolicy snap(cfg.model, e.snapshot());
      save(dir / "failure_snapshot.ckpt", snap, cfg);
      err << "parameters from the start of iteration " << e.iteration() << " saved to "
          << (dir / "failure_snapshot.ckpt").string() << '\n';
      throw;
    }
    return static_cast<int>(kOk);
  });
}

int cmd_verify(const VerifyOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    std::optional<Loaded> loaded;
    config::RunConfig cfg;
    if (o.random) {
      if (o.config.empty()) throw ConfigError("--random needs --config");
      if (!fs::exists(o.config)) throw IoError("config file not found: " + o.config);
      cfg = config::load_run_config(o.config);
    } else {
      if (o.checkpoint.empty()) throw ConfigError("verify needs --checkpoint (or --random --config)");
      loaded.emplace(load_policy(o.checkpoint));
      cfg = loaded->config;
    }
    if (o.n) cfg.verify_n = *o.n;
    if (o.confidence) cfg.confidence = *o.confidence;
    if (o.seed) cfg.seed = *o.seed;
    if (o.greedy) cfg.greedy = *o.greedy;
    cfg.finalize();
    const auto specs = config::build_specs(cfg);
    const std::string dir =
        o.out ? *o.out
              : (o.random ? cfg.out_dir : fs::path(o.checkpoint).parent_path().string());

    nlohmann::ordered_json extra;
    extra["task"] = cfg.task;
    if (o.random) {
      extra["policy"] = "uniform_random";
    } else {
      extra["policy"] = "checkpoint";
      extra["checkpoint_id"] = checkpoint_id(loaded->policy);
      extra["greedy"] = cfg.greedy;
    }
    const verify::ActionSelector select =
        o.random ? verify::uniform_random_selector(cfg.game.n_agents)
                 : verify::policy_selector(loaded->policy, cfg.greedy);
    const int threads = cfg.train.threads == 0 ? 1 : cfg.train.threads;
    const verify::Verification v = verify::estimate_satisfaction(
        cfg.game, specs, select, cfg.verify_n, cfg.confidence, cfg.seed, threads);

    if (!dir.empty()) make_dir(dir);
    const fs::path report = fs::path(dir.empty() ? "." : dir) / "verify_report.json";
    write_file(report, verify::report_json(v, cfg.seed, extra.dump()));
    const auto& e = v.estimate;
    out << "satisfied " << e.successes << " / " << e.trials << "  p_hat " << fmt(e.p_hat) << "  "
        << e.confidence * 100 << "% CI [" << fmt(e.interval.lo) << ", " << fmt(e.interval.hi)
        << "]  half-width " << fmt(e.interval.half_width) << '\n';
    out << "wrote " << report.string() << '\n';
    return static_cast<int>(kOk);
  });
}

int cmd_eval(const EvalOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (o.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
    Loaded loaded = load_policy(o.checkpoint);
    config::RunConfig& cfg = loaded.config;
    if (o.episodes) cfg.eval_episodes = *o.episodes;
    if (o.seed) cfg.seed = *o.seed;
    if (o.greedy) cfg.greedy = *o.greedy;
    cfg.finalize();
    const auto specs = config::build_specs(cfg);
    const stl::Spec joint = stl::conjoin(specs);
    const fs::path dir = o.out ? fs::path(*o.out) : fs::path(o.checkpoint).parent_path() / "eval";
    make_dir(dir.string());
    const verify::ActionSelector select = verify::policy_selector(loaded.policy, cfg.greedy);
    double sum = 0.0, lo = 0.0, hi = 0.0;
    int satisfied = 0;
    for (int k = 0; k < cfg.eval_episodes; ++k) {
      const std::uint64_t seed = verify::evaluation_seed(cfg.seed, k);
      const game::EpisodeRecord rec = verify::play_evaluation_episode(cfg.game, specs, select, seed);
      char name[64];
      std::snprintf(name, sizeof name, "episode_%04d.jsonl", k);
      std::ostringstream text;
      game::write_episode_jsonl(rec, text);
      write_file(dir / name, text.str());
      const double rho = stl::robustness(joint, stl::TraceView(rec.trajectory), 0);
      sum += rho;
      lo = k == 0 ? rho : std::min(lo, rho);
      hi = k == 0 ? rho : std::max(hi, rho);
      satisfied += rho > 0.0 ? 1 : 0;
      out << name << "  robustness " << fmt(rho) << (rho > 0.0 ? "  satisfied" : "  violated") << '\n';
    }
    if (cfg.eval_episodes > 0) {
      out << "episodes " << cfg.eval_episodes << "  satisfied " << satisfied << "  mean robustness "
          << fmt(sum / cfg.eval_episodes) << "  min " << fmt(lo) << "  max " << fmt(hi) << '\n';
    }
    return static_cast<int>(kOk);
  });
}

int cmd_monitor(const std::string& spec_path, const std::string& trace_path, std::ostream& out,
                std::ostream& err) {
  return guarded(err, [&] {
    const auto specs = config::read_spec_file(spec_path);
    const stl::Spec spec = stl::conjoin(specs);
    std::ifstream in(trace_path);
    if (!in) throw IoError("cannot read trace file " + trace_path);
    const stl::Trajectory trace = game::read_trace_jsonl(in);
    const double rho = stl::robustness(spec, stl::TraceView(trace), 0);
    const bool ok = stl::evaluate_boolean(spec, stl::TraceView(trace), 0);
    out << "robustness " << fmt(rho) << '\n' << (ok ? "satisfied" : "violated") << '\n';
    return static_cast<int>(ok ? kOk : kViolated);
  });
}

}  // namespace tdmat::cli
