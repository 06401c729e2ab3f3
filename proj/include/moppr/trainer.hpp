#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "moppr/checkpoint.hpp"
#include "moppr/objective.hpp"
#include "moppr/samples.hpp"
#include "moppr/step.hpp"

namespace moppr {

struct TrainConfig {
  double learning_rate = 0.01;
  double adagrad_epsilon = 1e-8;
  int batch_size_B = 64;
  std::int64_t steps = 2000;
  std::uint64_t seed = 7;
  /// 0: only the initial and final checkpoints.
  std::int64_t checkpoint_every = 0;
  std::vector<ObjectiveId> enabled_objectives{ObjectiveId::Relevance, ObjectiveId::Exposure, ObjectiveId::Click,
                                              ObjectiveId::Purchase};
  WeightMode weight_mode = WeightMode::InversePositiveCount;
  bool sample_level_weights = false;
  /// Batches prepared ahead of the update step.
  int prefetch_depth = 2;
  /// Hard negatives mined per query when SampleConfig::extra_hard_negatives > 0.
  int hard_pool_size = 50;

  bool enabled(ObjectiveId o) const;
  LossWeights loss_weights() const;
  void validate() const;
};

/// p -= lr * g / (sqrt(acc) + eps) after acc += g^2. Throws NumericError
/// naming the offending tensor when a gradient is not finite; nothing is
/// modified in that case.
void adagrad_step(Parameters<float>& params, const Parameters<float>& grads, Parameters<float>& accumulators,
                  double lr, double eps, const ParameterLayout* layout = nullptr);

/// Deterministic batch producer: the batch for a step is a pure function of
/// (seed, step), which is what makes resumed runs match uninterrupted ones.
class BatchSource {
 public:
  BatchSource(const World& world, std::span<const PageView> pages, SampleConfig config, std::uint64_t seed,
              int hard_pool_size = 50);

  Batch batch(std::int64_t step) const;
  BatchInputs inputs(std::int64_t step) const { return resolve_batch(batch(step), *world_); }
  /// Number of training units (pages, or clicks in single-positive mode).
  std::size_t units() const { return units_.size(); }
  const SampleConfig& config() const { return config_; }

 private:
  std::vector<std::size_t> epoch_order(std::int64_t epoch) const;

  const World* world_;
  std::span<const PageView> pages_;
  SampleConfig config_;
  std::uint64_t seed_;
  /// (page index, click ordinal); the ordinal is ignored in multi-positive mode.
  std::vector<std::pair<std::size_t, int>> units_;
  HardNegativePool hard_pool_;
};

struct StepLog {
  std::int64_t step = 0;
  LossBreakdown loss;
  double grad_norm = 0.0;
};

nlohmann::json step_log_to_json(const StepLog& log);

struct TrainOptions {
  /// Checkpoints and the step log go here; nothing is written when empty.
  std::filesystem::path out_dir;
  /// Continue from this state instead of a fresh initialization.
  std::optional<Checkpoint> resume;
  /// Receives one human-readable line every `progress_every` steps.
  std::ostream* progress = nullptr;
  std::int64_t progress_every = 100;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<StepLog> logs;
};

/// Trains until TrainConfig::steps updates have been applied. Throws
/// NumericError on a non-finite loss; checkpoints already written stay.
TrainResult train(const World& world, std::span<const PageView> pages, const ModelConfig& model_config,
                  const SampleConfig& sample_config, const TrainConfig& config, const TrainOptions& options = {});

std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, std::int64_t step);
std::filesystem::path final_checkpoint_path(const std::filesystem::path& out_dir);

}  // namespace moppr
