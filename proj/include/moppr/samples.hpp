#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "moppr/common.hpp"
#include "moppr/rng.hpp"
#include "moppr/world.hpp"

namespace moppr {

enum class SampleMode : std::uint8_t {
  /// One sample per page view: impressions, under-impressions, negatives.
  MultiPositive = 0,
  /// One sample per clicked item with only that item as the positive.
  SinglePositiveClick = 1,
};

struct SampleConfig {
  int n_impressions = 10;
  int m_underimpressions = 10;
  int rand_neg_per_sample = 20;
  int batch_size_B = 1024;
  /// Pages with fewer clicks are skipped ("more than one click").
  int min_clicks_filter = 2;
  bool online_hard_mining = false;
  int extra_hard_negatives = 0;
  /// Ablations: mask non-clicked impressions / under-impressions out of the sample.
  bool drop_non_clicked_impressions = false;
  bool drop_under_impressions = false;
  SampleMode mode = SampleMode::MultiPositive;

  /// L, the number of shared random negatives per batch.
  int total_random_negatives() const { return rand_neg_per_sample * batch_size_B; }
  void validate() const;
};

/// One binary vector per objective, aligned with a sample's item slots.
struct ObjectiveLabels {
  std::array<std::vector<std::uint8_t>, kNumObjectives> values;

  std::vector<std::uint8_t>& operator[](ObjectiveId o) { return values[static_cast<int>(o)]; }
  const std::vector<std::uint8_t>& operator[](ObjectiveId o) const { return values[static_cast<int>(o)]; }
  void resize(std::size_t n);
};

struct UserFeatures {
  UserId user = 0;
  UserProfile profile;
  /// Unfiltered; category filtering happens in the user-query tower.
  BehaviorHistory behaviors;
};

struct QueryFeatures {
  QueryId query = 0;
  std::vector<TermId> terms;
  int freq_bucket = 0;
  std::vector<CategoryId> relevant_categories;
};

UserFeatures make_user_features(const World& world, UserId user, double now);
QueryFeatures make_query_features(const World& world, QueryId query);

/// Slots are laid out as [impressions | under-impressions | random negatives | hard negatives].
struct TrainingSample {
  UserFeatures user;
  QueryFeatures query;
  double ts = 0.0;
  int n_impression_slots = 0;
  int n_under_slots = 0;
  int n_random_slots = 0;
  int n_hard_slots = 0;
  std::vector<ItemId> item_slots;
  /// 1 = slot takes part in the softmax; 0 = padding or ablated.
  std::vector<std::uint8_t> mask;
  ObjectiveLabels labels;

  int own_slot_count() const { return n_impression_slots + n_under_slots; }
  int random_begin() const { return own_slot_count(); }
  int hard_begin() const { return own_slot_count() + n_random_slots; }
  std::span<const ItemId> random_negatives() const {
    return std::span<const ItemId>(item_slots).subspan(random_begin(), n_random_slots);
  }
};

bool operator==(const TrainingSample& a, const TrainingSample& b);

/// Query -> mined hard negatives.
using HardNegativePool = std::map<QueryId, std::vector<ItemId>>;

/// Multi-positive sample of a page view; nullopt when the page has fewer
/// than `min_clicks_filter` clicks. Throws DataIntegrity on unknown items.
std::optional<TrainingSample> build_sample(const PageView& pv, const World& world, const SampleConfig& config,
                                           Rng& rng, const HardNegativePool* hard_pool = nullptr);

/// Single-positive click samples of a page view (one per clicked item),
/// subject to the same click filter.
std::vector<TrainingSample> build_single_positive_samples(const PageView& pv, const World& world,
                                                          const SampleConfig& config, Rng& rng);

struct Batch {
  std::vector<TrainingSample> samples;
  /// Union of every sample's random negatives, in sample order (length L).
  std::vector<ItemId> shared_negatives;
  /// Per sample, per shared negative: 0 when it collides with the sample's own items.
  std::vector<std::vector<std::uint8_t>> shared_mask;
  /// Filled by extend_online_hard: other samples' impressions, all labels 0.
  std::vector<std::vector<ItemId>> online_negatives;

  /// Own non-shared slots + L + online negatives.
  std::size_t candidate_count(std::size_t s) const;
};

Batch assemble_batch(std::vector<TrainingSample> samples, const SampleConfig& config);

/// No-op unless config.online_hard_mining is set.
Batch extend_online_hard(Batch batch, const SampleConfig& config);

/// Up to k distinct items logged for the query (impressions or
/// under-impressions) that fail the relevance oracle, in first-seen order.
std::vector<ItemId> mine_hard_negatives(std::span<const PageView> logs, const World& world, QueryId query_id, int k);
HardNegativePool build_hard_negative_pool(std::span<const PageView> logs, const World& world, int k);

nlohmann::json sample_to_json(const TrainingSample& s);
TrainingSample sample_from_json(const nlohmann::json& j);
void write_sample_shard(const std::filesystem::path& path, std::span<const TrainingSample> samples);
std::vector<TrainingSample> read_sample_shard(const std::filesystem::path& path);

}  // namespace moppr
