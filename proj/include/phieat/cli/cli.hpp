#pragma once

#include <string>
#include <utility>
#include <vector>

#include "phieat/synthgen/dataset.hpp"
#include "phieat/trainer/trainer.hpp"

namespace phieat::cli {

// Dotted keys mirror the config structs: bare names for top-level training
// fields (total_steps, base_lr, ...), weights.*, backbone.*, views.* for the
// nested ones, and the dataset fields for generation. Unknown keys and
// malformed values throw config errors naming the key.
void apply_override(trainer::TrainConfig& cfg, const std::string& key, const std::string& value);
void apply_override(synthgen::DatasetConfig& cfg, const std::string& key,
                    const std::string& value);

// "k=v,k2=v2" from --overrides.
std::vector<std::pair<std::string, std::string>> parse_overrides(const std::string& csv);

// Flat `key = value` lines with # comments; keys as in apply_override.
trainer::TrainConfig load_train_config(const std::string& path);

// Entry point behind main(); args excludes the program name. Exit codes:
// 0 success, 1 runtime failure, 2 usage or config error.
int run_cli(const std::vector<std::string>& args);

}  // namespace phieat::cli
