#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"

#include "moppr/evalsuite.hpp"
#include "moppr/features.hpp"
#include "moppr/index.hpp"
#include "moppr/model.hpp"
#include "moppr/samples.hpp"
#include "moppr/trainer.hpp"
#include "moppr/world.hpp"

namespace moppr {

struct ExperimentConfig {
  WorldConfig world;
  SampleConfig samples;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  IndexConfig index;
  /// Training page views simulated by `gen`.
  int train_pages = 20000;
  /// Copied into every component seed by resolve().
  std::uint64_t seed = 7;
  std::string out_dir = "out";

  /// Propagates the global seed and the trainer's batch size, then validates.
  void resolve();
  void validate() const;
};

void to_json(nlohmann::json& j, const SampleMode& m);
void from_json(const nlohmann::json& j, SampleMode& m);
void to_json(nlohmann::json& j, const WeightMode& m);
void from_json(const nlohmann::json& j, WeightMode& m);
void to_json(nlohmann::json& j, const WorldConfig& c);
void from_json(const nlohmann::json& j, WorldConfig& c);
void to_json(nlohmann::json& j, const SampleConfig& c);
void from_json(const nlohmann::json& j, SampleConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);
void to_json(nlohmann::json& j, const IndexConfig& c);
void from_json(const nlohmann::json& j, IndexConfig& c);
void to_json(nlohmann::json& j, const FeatureSpace& c);
void from_json(const nlohmann::json& j, FeatureSpace& c);
void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// Parses a config document; absent fields keep their defaults and unknown
/// fields are rejected with InvalidConfig.
ExperimentConfig parse_experiment_config(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

}  // namespace moppr
