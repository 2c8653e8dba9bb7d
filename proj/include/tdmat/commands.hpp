#pragma once

// Command implementations behind the tdmat executable. Each returns a
// process exit code and writes human-readable output to `out`/`err`.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>

namespace tdmat::cli {

enum ExitCode : int {
  kOk = 0,
  kViolated = 1,     // monitor: specification not satisfied
  kUsage = 2,        // bad flags or configuration
  kIo = 3,           // file missing, unreadable or unwritable
  kParse = 4,        // malformed spec, trace or config syntax
  kCheckpoint = 5,   // corrupt checkpoint or architecture mismatch
  kTraining = 6,     // non-finite loss during training
  kInternal = 7,
};

struct TrainOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

struct VerifyOptions {
  std::string checkpoint;
  std::string config;  // used with `random` instead of a checkpoint
  bool random = false;
  std::optional<long> n;
  std::optional<double> confidence;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<bool> greedy;
};

struct EvalOptions {
  std::string checkpoint;
  std::optional<int> episodes;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<bool> greedy;
};

int cmd_train(const TrainOptions& options, std::ostream& out, std::ostream& err);
int cmd_verify(const VerifyOptions& options, std::ostream& out, std::ostream& err);
int cmd_eval(const EvalOptions& options, std::ostream& out, std::ostream& err);
int cmd_monitor(const std::string& spec_path, const std::string& trace_path, std::ostream& out,
                std::ostream& err);

}  // namespace tdmat::cli
