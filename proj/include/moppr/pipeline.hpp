#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "moppr/config.hpp"
#include "moppr/evalsuite.hpp"
#include "moppr/index.hpp"
#include "moppr/trainer.hpp"
#include "moppr/world.hpp"

namespace moppr {

/// Everything `gen` produces: the world (with statistics accumulated from
/// the training logs), training and held-out page views, evaluation records.
struct Dataset {
  World world;
  std::vector<PageView> train_pages;
  std::vector<PageView> heldout_pages;
  std::vector<EvalRecord> records;
  int train_requested = 0;
  int train_skipped_empty = 0;
  int heldout_requested = 0;
  int heldout_skipped_empty = 0;
};

Dataset generate_dataset(const ExperimentConfig& config);

/// Layout under `dir`: world/, data/{train_pages,heldout_pages,eval_records}.jsonl,
/// samples/{manifest.json,shard_*.jsonl}, manifest.json.
void write_dataset(const Dataset& data, const ExperimentConfig& config, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

/// Writes the resolved configuration as config.json in `dir`.
void echo_config(const ExperimentConfig& config, const std::filesystem::path& dir);

TrainResult train_experiment(const Dataset& data, const ExperimentConfig& config, const TrainOptions& options = {});

/// Catalog embeddings of a checkpoint, indexed per the config (prices from the world).
EmbeddingIndex build_item_index(const Checkpoint& ckpt, const World& world, const IndexConfig& config);

/// One ablation variant: a name plus a JSON merge patch applied to the base
/// experiment configuration. Patches may not touch the world or simulation.
struct Variant {
  std::string name;
  nlohmann::json patch = nlohmann::json::object();
};

std::vector<Variant> parse_variants(const nlohmann::json& j);
/// Full model minus one piece at a time.
std::vector<Variant> component_ablation_variants();
/// Shared-negative count sweep: rand_neg_per_sample chosen so that L hits each value.
std::vector<Variant> negative_sweep_variants(const std::vector<int>& total_negatives, int batch_size);
/// The single-positive, click-only baseline.
Variant single_positive_baseline();

struct AblationRow {
  std::string name;
  bool ok = false;
  std::string error;
  MetricsReport report;
};

struct AblationTable {
  std::vector<AblationRow> rows;  // rows[0] is the base
  std::string csv() const;
  std::string text() const;
};

ExperimentConfig apply_variant(const ExperimentConfig& base, const Variant& v);

/// Trains and evaluates the base and every variant on the same data with
/// the same seed. A failing variant is recorded and the run continues.
AblationTable ablation_run(const Dataset& data, const ExperimentConfig& base, const std::vector<Variant>& variants,
                           std::ostream* progress = nullptr);

}  // namespace moppr
