// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "rbwp/harness/config.hpp"

namespace rbwp::cli {

/// Raised for unreadable files, malformed lines, unknown or missing keys and
/// out-of-range values. The message names the offending key or path.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct FileConfig {
  harness::RunConfig run;
  std::filesystem::path output_dir;
};

/// Sectioned `key = value` text with `#` comments. Sections: [scenario],
/// [model], [loss], [gate], [run]. Required keys: scenario.tasks,
/// scenario.classes_per_task, scenario.seed, run.strategy, run.output_dir.
/// Every other key falls back to its default.
FileConfig parse_config(const std::string& text);
FileConfig load_config(const std::filesystem::path& path);

/// Text form accepted by parse_config, listing every key.
std::string format_config(const FileConfig& config);

/// Reads RBWP_PRECISION ("32" or "64", default 32).
diff::Precision precision_from_env();

}  // namespace rbwp::cli
