#pragma once

#include "hybrid/tensor_io.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace hybrid {

/// Commands understood by the experiment runner.
inline const std::vector<std::string> kCommands = {"realize",    "hankel",        "ssm-equiv",
                                                   "compose",    "spsim",         "tile-bench",
                                                   "select-layers", "perf-model", "prime"};

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> output_dir;
};

/// Schema and cross-field checks. Returns every problem found; empty means valid.
std::vector<std::string> validate(const Json& config, const Overrides& overrides = {});

struct ReportBundle {
  std::string command;
  std::string config_hash;
  std::vector<std::filesystem::path> files;
  std::vector<std::string> violations;  // invariant checks that failed during the run
  std::vector<std::string> summary;     // human-readable lines
};

class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> diagnostics);
  const std::vector<std::string>& diagnostics() const { return diagnostics_; }

 private:
  std::vector<std::string> diagnostics_;
};

/// Validates, then runs the configured command and writes its reports.
/// Throws ConfigError with all diagnostics when the config is invalid.
ReportBundle run(const Json& config, const Overrides& overrides = {});

}  // namespace hybrid
