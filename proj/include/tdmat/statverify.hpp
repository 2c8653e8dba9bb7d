#pragma once

// Monte Carlo satisfaction estimates with Wald confidence intervals.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tdmat/game.hpp"
#include "tdmat/model.hpp"
#include "tdmat/random.hpp"

namespace tdmat::verify {

/// Two-sided standard normal quantile z_{alpha/2} for alpha = 1 - confidence,
/// via Acklam's rational approximation of the inverse normal CDF (relative
/// error below 1.2e-9). Throws std::domain_error outside (0, 0.9999].
double z_value(double confidence);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  double half_width = 0.0;  // before clamping
};

/// p_hat +- z sqrt(p_hat (1 - p_hat) / n), clamped to [0, 1].
Interval wald_interval(long successes, long trials, double confidence);

struct BernoulliEstimate {
  long successes = 0;
  long trials = 0;
  double p_hat = 0.0;
  double confidence = 0.0;
  double z = 0.0;
  Interval interval;
};

BernoulliEstimate make_estimate(long successes, long trials, double confidence);

/// Chooses a joint action from the observation history; `rng` is private to
/// the episode.
using ActionSelector = std::function<game::JointAction(
    const std::vector<game::ObservationSet>& history, const game::WorldState& state, Rng& rng)>;

ActionSelector policy_selector(const model::TdmatPolicy& policy, bool greedy);
ActionSelector uniform_random_selector(int n_agents);

/// Seed of evaluation episode k.
std::uint64_t evaluation_seed(std::uint64_t seed, long episode);

struct EpisodeOutcome {
  std::uint64_t seed = 0;
  double robustness = 0.0;
  bool satisfied = false;
};

struct Verification {
  BernoulliEstimate estimate;
  std::vector<EpisodeOutcome> episodes;
};

/// Plays one evaluation episode (reset(seed), selector rng derived from seed).
game::EpisodeRecord play_evaluation_episode(const game::GameSpec& game,
                                            std::span<const stl::Spec> specs,
                                            const ActionSelector& select, std::uint64_t seed);

/// n seeded episodes; success iff the robustness of the conjunction of
/// `specs` on the full trajectory is strictly positive.
Verification estimate_satisfaction(const game::GameSpec& game, std::span<const stl::Spec> specs,
                                   const ActionSelector& select, long n, double confidence,
                                   std::uint64_t seed, int threads = 1);

/// JSON object with X, n, p_hat, confidence, z, interval, seed and the
/// caller-supplied fields in `extra` (a JSON object text, may be empty).
std::string report_json(const Verification& v, std::uint64_t seed, const std::string& extra = {});

}  // namespace tdmat::verify
