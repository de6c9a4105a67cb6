#pragma once

#include "msgcl/config.hpp"
#include "msgcl/data.hpp"

#include <json.hpp>

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace msgcl::cli {

enum ExitCode { kOk = 0, kCheckFailed = 1, kUsage = 2 };

/// Fully resolved run configuration, written to config.json in every run
/// directory.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string data;
  std::string run_dir;
};

nlohmann::json to_json(const RunConfig& rc);
RunConfig run_config_from_json(const nlohmann::json& j);

/// Loads a dataset file written by `prepare`, or ingests a raw log
/// (TSV / ratings.dat, optionally gzipped) with default filters.
SequenceDataset load_any_dataset(const std::filesystem::path& path, int max_len, LogFormat format);

/// Entry point; `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace msgcl::cli
