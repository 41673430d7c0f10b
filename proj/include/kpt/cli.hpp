#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "kpt/transfer.hpp"

namespace kpt {

/// Exit codes of the kpt tool.
enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2, kExitIo = 3, kExitNumeric = 4, kExitInconsistent = 5 };

/// A train config file: the experiment plus where its data and outputs live.
///   {"run_id": ..., "dataset": <dir>, "val_count": 50, "split_seed": 0,
///    "output_dir": <optional root>, "experiment": {...}}
struct RunDescriptor {
  std::string run_id;
  std::filesystem::path dataset;
  std::size_t val_count = 50;
  std::uint64_t split_seed = 0;
  std::filesystem::path output_dir;  // empty: --out, then KPT_OUTPUT_ROOT, then "runs"
  ExperimentDescriptor experiment;
};

void to_json(nlohmann::json& j, const RunDescriptor& r);
void from_json(const nlohmann::json& j, RunDescriptor& r);

/// Runs one kpt command line (without the program name). Every error is
/// reported on `err` and mapped to its exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace kpt
