// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fans/model.hpp"
#include "fans/training.hpp"

namespace fans {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// `key=value` lines; blank lines and '#' comments are skipped. Malformed
/// lines and repeated keys are ConfigErrors naming `what` and the line.
KeyValues parse_key_values(std::string_view text, std::string_view what);

/// Everything a training run needs besides data.
struct RunConfig {
  ModelConfig model;
  TrainHyper train;
};

/// Starts from the preset named by `variant` and `scale` (default small), then
/// applies every other key. Unknown keys are a ConfigError naming the key.
RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Canonical text listing every key; parse_run_config(to_text(c)) == c.
std::string to_text(const ModelConfig& config);
std::string to_text(const RunConfig& config);

/// Parses the model keys only (the format written by to_text(ModelConfig)).
ModelConfig parse_model_config(std::string_view text);

/// 64-bit FNV-1a over the canonical text.
std::uint64_t config_hash(const RunConfig& config);

}  // namespace fans
