#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "tdmat/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Train, evaluate and verify transformer policies for STL-specified multi-agent tasks"};
  app.require_subcommand(1);

  tdmat::cli::TrainOptions train;
  std::uint64_t train_seed = 0;
  std::string train_out;
  auto* cmd_train = app.add_subcommand("train", "train a policy from a run configuration");
  cmd_train->add_option("--config", train.config, "run configuration file")->required();
  auto* train_seed_opt = cmd_train->add_option("--seed", train_seed, "override the config seed");
  auto* train_out_opt = cmd_train->add_option("--out", train_out, "override the output directory");

  tdmat::cli::VerifyOptions verify;
  long verify_n = 0;
  double verify_conf = 0.0;
  std::uint64_t verify_seed = 0;
  std::string verify_out;
  bool verify_greedy = false;
  auto* cmd_verify = app.add_subcommand("verify", "estimate the satisfaction probability");
  cmd_verify->add_option("--checkpoint", verify.checkpoint, "trained checkpoint");
  cmd_verify->add_option("--config", verify.config, "run configuration (with --random)");
  cmd_verify->add_flag("--random", verify.random, "evaluate a uniform-random policy");
  auto* verify_n_opt = cmd_verify->add_option("--n", verify_n, "number of episodes");
  auto* verify_conf_opt = cmd_verify->add_option("--confidence", verify_conf, "confidence level");
  auto* verify_seed_opt = cmd_verify->add_option("--seed", verify_seed, "evaluation seed");
  auto* verify_out_opt = cmd_verify->add_option("--out", verify_out, "report directory");
  auto* verify_greedy_opt = cmd_verify->add_flag("--greedy", verify_greedy, "argmax actions");

  tdmat::cli::EvalOptions eval;
  int eval_episodes = 0;
  std::uint64_t eval_seed = 0;
  std::string eval_out;
  bool eval_greedy = false;
  auto* cmd_eval = app.add_subcommand("eval", "roll out a checkpoint and write traces");
  cmd_eval->add_option("--checkpoint", eval.checkpoint, "trained checkpoint")->required();
  auto* eval_episodes_opt = cmd_eval->add_option("--episodes", eval_episodes, "number of episodes");
  auto* eval_seed_opt = cmd_eval->add_option("--seed", eval_seed, "evaluation seed");
  auto* eval_out_opt = cmd_eval->add_option("--out", eval_out, "trace directory");
  auto* eval_greedy_opt = cmd_eval->add_flag("--greedy", eval_greedy, "argmax actions");

  std::string spec_path, trace_path;
  auto* cmd_monitor = app.add_subcommand("monitor", "robustness of a trace against a specification");
  cmd_monitor->add_option("spec", spec_path, "specification file")->required();
  cmd_monitor->add_option("trace", trace_path, "trace file (JSON Lines)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : tdmat::cli::kUsage;
  }

  if (*cmd_train) {
    if (*train_seed_opt) train.seed = train_seed;
    if (*train_out_opt) train.out = train_out;
    return tdmat::cli::cmd_train(train, std::cout, std::cerr);
  }
  if (*cmd_verify) {
    if (*verify_n_opt) verify.n = verify_n;
    if (*verify_conf_opt) verify.confidence = verify_conf;
    if (*verify_seed_opt) verify.seed = verify_seed;
    if (*verify_out_opt) verify.out = verify_out;
    if (*verify_greedy_opt) verify.greedy = verify_greedy;
    return tdmat::cli::cmd_verify(verify, std::cout, std::cerr);
  }
  if (*cmd_eval) {
    if (*eval_episodes_opt) eval.episodes = eval_episodes;
    if (*eval_seed_opt) eval.seed = eval_seed;
    if (*eval_out_opt) eval.out = eval_out;
    if (*eval_greedy_opt) eval.greedy = eval_greedy;
    return tdmat::cli::cmd_eval(eval, std::cout, std::cerr);
  }
  return tdmat::cli::cmd_monitor(spec_path, trace_path, std::cout, std::cerr);
}
