#pragma once

#include <filesystem>
#include <string>

#include "jl1/metrics.hpp"
#include "jl1/training.hpp"

namespace jl1 {

// One parsed experiment document: the training run plus the local
// evaluation sampling parameters. The text format is UTF-8 `key = value`
// lines with `#` comments; unknown or duplicated keys are rejected, and
// `model` is the only key without a default.
struct ExperimentConfig {
  TrainConfig train;
  LocalSampleSpec eval;
};

// Parses a document; throws format_error for malformed lines, unknown
// or duplicate keys, unparsable values, and a missing `model` key, and
// contract_error when the parsed values violate a config invariant.
ExperimentConfig parse_experiment_config(const std::string& text);

ExperimentConfig read_experiment_config(const std::filesystem::path& path);

// The key table (name, default, meaning), one key per line; what the
// CLI prints for --help-config and what the README documents.
std::string experiment_config_reference();

}  // namespace jl1
