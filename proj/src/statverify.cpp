#include "tdmat/statverify.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numbers>
#include <stdexcept>
#include <thread>

#include "json.hpp"

#include "tdmat/error.hpp"

namespace tdmat::verify {

namespace {

// Acklam's inverse normal CDF plus one Halley refinement step.
double inverse_normal_cdf(double p) {
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                 2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double p_low = 0.02425;
  double x;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - p_low) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double e = 0.5 * std::erfc(-x / std::numbers::sqrt2) - p;
  const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(x * x / 2.0);
  return x - u / (1.0 + x * u / 2.0);
}

}  // namespace

double z_value(double confidence) {
  if (!(confidence > 0.0 && confidence < 1.0)) {
    throw std::domain_error("confidence must be in (0, 1)");
  }
  if (confidence > 0.9999) throw std::domain_error("confidence above 0.9999 is not supported");
  return inverse_normal_cdf(1.0 - (1.0 - confidence) / 2.0);
}

Interval wald_interval(long successes, long trials, double confidence) {
  if (trials < 1) throw std::invalid_argument("wald_interval: n must be >= 1");
  if (successes < 0 || successes > trials) throw std::invalid_argument("wald_interval: X not in [0, n]");
  const double p = static_cast<double>(successes) / static_cast<double>(trials);
  const double h = z_value(confidence) * std::sqrt(p * (1.0 - p) / static_cast<double>(trials));
  return {std::max(0.0, p - h), std::min(1.0, p + h), h};
}

BernoulliEstimate make_estimate(long successes, long trials, double confidence) {
  BernoulliEstimate e;
  e.interval = wald_interval(successes, trials, confidence);
  e.successes = successes;
  e.trials = trials;
  e.p_hat = static_cast<double>(successes) / static_cast<double>(trials);
  e.confidence = confidence;
  e.z = z_value(confidence);
  return e;
}

ActionSelector policy_selector(const model::TdmatPolicy& policy, bool greedy) {
  const std::vector<int> order = model::identity_order(policy.config().n_agents);
  return [&policy, order, greedy](const std::vector<game::ObservationSet>& history,
                                  const game::WorldState&, Rng& rng) {
    return model::sample_joint_action(policy, history, order, rng, greedy).actions;
  };
}

ActionSelector uniform_random_selector(int n_agents) {
  return [n_agents](const std::vector<game::ObservationSet>&, const game::WorldState&, Rng& rng) {
    game::JointAction a(static_cast<std::size_t>(n_agents));
    for (int& x : a) x = rng.below(game::kNumActions);
    return a;
  };
}

std::uint64_t evaluation_seed(std::uint64_t seed, long episode) {
  return derive_seed(seed, 0x7e57ULL, static_cast<std::uint64_t>(episode));
}

game::EpisodeRecord play_evaluation_episode(const game::GameSpec& game,
                                            std::span<const stl::Spec> specs,
                                            const ActionSelector& select, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xac7ULL));
  return game::play_episode(game, specs, seed,
                            [&](const std::vector<game::ObservationSet>& history,
                                const game::WorldState& s) { return select(history, s, rng); });
}

Verification estimate_satisfaction(const game::GameSpec& game, std::span<const stl::Spec> specs,
                                   const ActionSelector& select, long n, double confidence,
                                   std::uint64_t seed, int threads) {
  if (n < 1) throw std::invalid_argument("estimate_satisfaction: n must be >= 1");
  z_value(confidence);  // validate before any rollout
  const stl::Spec joint = stl::conjoin(specs);
  Verification v;
  v.episodes.resize(static_cast<std::size_t>(n));
  std::vector<std::exception_ptr> errors(v.episodes.size());
  auto run = [&](std::size_t k) {
    try {
      EpisodeOutcome& out = v.episodes[k];
      out.seed = evaluation_seed(seed, static_cast<long>(k));
      const game::EpisodeRecord rec = play_evaluation_episode(game, specs, select, out.seed);
      out.robustness = stl::robustness(joint, stl::TraceView(rec.trajectory), 0);
      out.satisfied = out.robustness > 0.0;
    } catch (...) {
      errors[k] = std::current_exception();
    }
  };
  const std::size_t workers = std::min<std::size_t>(threads > 1 ? threads : 1, v.episodes.size());
  if (workers <= 1) {
    for (std::size_t k = 0; k < v.episodes.size(); ++k) run(k);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t k = w; k < v.episodes.size(); k += workers) run(k);
      });
    }
    for (auto& t : pool) t.join();
  }
  long successes = 0;
  for (std::size_t k = 0; k < v.episodes.size(); ++k) {
    if (errors[k]) {
      try {
        std::rethrow_exception(errors[k]);
      } catch (const std::exception& e) {
        throw Error("evaluation episode " + std::to_string(k) + ": " + e.what());
      }
    }
    successes += v.episodes[k].satisfied ? 1 : 0;
  }
  v.estimate = make_estimate(successes, n, confidence);
  return v;
}

std::string report_json(const Verification& v, std::uint64_t seed, const std::string& extra) {
  using nlohmann::ordered_json;
  const BernoulliEstimate& e = v.estimate;
  ordered_json j;
  j["successes"] = e.successes;
  j["trials"] = e.trials;
  j["p_hat"] = e.p_hat;
  j["confidence"] = e.confidence;
  j["z"] = e.z;
  j["half_width"] = e.interval.half_width;
  j["interval"] = {e.interval.lo, e.interval.hi};
  j["seed"] = seed;
  if (!extra.empty()) {
    const ordered_json fields = ordered_json::parse(extra);
    for (const auto& [key, value] : fields.items()) j[key] = value;
  }
  ordered_json eps = ordered_json::array();
  for (const auto& ep : v.episodes) {
    eps.push_back({{"seed", ep.seed}, {"robustness", ep.robustness}, {"satisfied", ep.satisfied}});
  }
  j["episodes"] = std::move(eps);
  return j.dump(2) + "\n";
}

}  // namespace tdmat::verify
