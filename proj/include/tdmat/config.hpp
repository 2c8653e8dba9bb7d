#pragma once

// Plain-text run configuration: one "key = value" per line, '#' starts a
// comment. Unknown keys, repeated keys and malformed values are errors.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "tdmat/game.hpp"
#include "tdmat/model.hpp"
#include "tdmat/stl.hpp"
#include "tdmat/trainer.hpp"

namespace tdmat::config {

struct RunConfig {
  game::GameSpec game;
  double radius = game::kLandmarkRadius;
  std::string task = "task1";  // task1 | task2 | reach | file
  std::string spec_file;       // used when task = file
  model::ModelConfig model;
  train::TrainConfig train;
  long verify_n = 2560;
  double confidence = 0.90;
  bool greedy = false;
  int eval_episodes = 2;
  int checkpoint_every = 0;  // 0 writes only the final checkpoint
  std::string out_dir = "runs/default";
  std::uint64_t seed = 0;

  /// Copies shared values into the nested configs (model dims from the
  /// game, seed and gamma into training) and checks every invariant.
  /// Throws ConfigError.
  void finalize();
};

/// Throws ParseError (position = 1-based line number) and ConfigError.
/// Relative spec_file paths are resolved against `base_dir`.
RunConfig parse_run_config(std::string_view text, const std::string& base_dir = {});
/// Throws IoError when the file cannot be read.
RunConfig load_run_config(const std::string& path);

/// Every key with its resolved value; parse_run_config of the result gives
/// back an equal configuration.
std::string format_run_config(const RunConfig& config);

/// One formula per non-blank line; '#' lines are comments.
std::vector<stl::Spec> read_spec_file(const std::string& path);

/// Per-agent specifications of the selected task.
std::vector<stl::Spec> build_specs(const RunConfig& config);

}  // namespace tdmat::config
