#pragma once

#include <filesystem>
#include <string_view>

#include <json.hpp>

#include "sbattn/model.hpp"
#include "sbattn/train.hpp"

namespace sbattn {

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
};

/// Named starting points: "imagenet-paper", "cifar-paper" and "desk"
/// (two-block SB model on a 2000-image subset for 10 epochs).
ExperimentConfig preset(std::string_view name);

/// Parses {"preset": ..., "model": {...}, "train": {...}}. Keys override the
/// preset (or the defaults); unknown keys raise ConfigError.
ExperimentConfig parse_experiment(const nlohmann::json& doc);
ExperimentConfig load_experiment(const std::filesystem::path& file);

nlohmann::json to_json(const ExperimentConfig& config);

/// Loads the balanced subsets named by the train config from a CIFAR-10
/// directory, builds the model and trains it.
RunReport run_experiment(const ExperimentConfig& config, const std::filesystem::path& data_dir);

}  // namespace sbattn
