#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "moppr/common.hpp"
#include "moppr/rng.hpp"

namespace moppr {

inline constexpr int kAgeBands = 7;
inline constexpr int kGenderBands = 3;
inline constexpr int kPowerLevels = 5;
inline constexpr int kQueryFreqBuckets = 8;
inline constexpr int kPriceBuckets = 10;
inline constexpr int kItemStats = 3;

struct WorldConfig {
  int num_users = 2000;
  int num_queries = 400;
  int num_items = 10000;
  int num_categories = 40;
  int num_super_categories = 8;
  int latent_dim = 16;
  int vocab_size = 4000;
  int num_brands = 400;
  int num_sellers = 600;

  int page_size_N = 10;
  int underimpression_pool = 100;
  /// Ranked positions N+1 .. N+skip are neither exposed nor sampled.
  int underimpression_skip = 5;
  /// How many of the pool's items the logging system records per page.
  int logged_underimpressions = 20;

  double click_scale = 4.0;
  double click_bias = -1.5;
  double purchase_scale = 4.0;
  double purchase_bias = 1.0;
  /// Purchase logit falls by this much per unit of ln(price) above the mean.
  double price_sensitivity = 1.0;

  int behavior_history_len = 30;
  double relevance_threshold = 0.0;
  double ranker_noise = 0.1;
  /// Fraction (relative to the relevant candidate count) of oracle-irrelevant
  /// items the cascade ranker lets into the retrieved list.
  double irrelevant_exposure_rate = 0.02;

  int max_query_terms = 4;
  int title_len = 6;
  double category_noise = 0.6;
  double item_noise = 0.9;
  double query_noise = 0.6;

  std::uint64_t seed = 7;

  /// Throws InvalidConfig on any zero/negative count or inconsistent size.
  void validate() const;
};

enum class BehaviorType : std::uint8_t { Click = 0, Collect = 1, Cart = 2, Purchase = 3 };

struct CatalogItem {
  ItemId id = 0;
  CategoryId category = 0;
  std::vector<double> latent;
  double price = 1.0;
  std::vector<TermId> title_terms;
  std::int32_t brand = 0;
  std::int32_t seller = 0;
  std::array<float, kItemStats> stats{};
};

struct UserProfile {
  int age_band = 0;
  int gender_band = 0;
  int power_level = 0;
};

struct BehaviorEvent {
  ItemId item = 0;
  BehaviorType type = BehaviorType::Click;
  /// Timestamp in days; histories live at or before day 0.
  double day = 0.0;
};

struct SynthUser {
  UserId id = 0;
  UserProfile profile;
  std::vector<double> latent;
  /// Most recent first.
  std::vector<BehaviorEvent> history;
};

struct SynthQuery {
  QueryId id = 0;
  std::vector<TermId> terms;
  /// Sorted, nonempty.
  std::vector<CategoryId> relevant_categories;
  std::vector<double> latent;
  double popularity = 1.0;
  int freq_bucket = 0;
};

struct BehaviorHistory {
  std::vector<ItemId> realtime;
  std::vector<ItemId> short_term;
  std::vector<ItemId> long_term;
};

struct Impression {
  ItemId item = 0;
  bool clicked = false;
  bool purchased = false;
  bool relevant = false;
};

struct UnderImpression {
  ItemId item = 0;
  bool relevant = false;
};

struct PageView {
  UserId user_id = 0;
  QueryId query_id = 0;
  double ts = 0.0;
  std::vector<Impression> impressions;
  std::vector<UnderImpression> under_impressions;
  /// Set when fewer than N relevant candidates existed. Not serialized:
  /// it is recoverable from the impression count.
  bool short_page = false;

  int clicks() const;
  int purchases() const;
};

/// Generated world plus derived lookup tables. Immutable after finalize().
class World {
 public:
  WorldConfig config;
  std::vector<CatalogItem> items;
  std::vector<SynthUser> users;
  std::vector<SynthQuery> queries;

  /// Rebuilds every derived table from items/users/queries.
  void finalize();

  const CatalogItem& item(ItemId id) const;
  const SynthUser& user(UserId id) const;
  const SynthQuery& query(QueryId id) const;
  bool has_item(ItemId id) const { return id >= 0 && id < static_cast<ItemId>(items.size()); }

  /// Items passing the relevance oracle for a query, ascending id.
  const std::vector<ItemId>& relevant_items(QueryId q) const;
  /// Categories ordered by the user's affinity, best first.
  const std::vector<CategoryId>& user_top_categories(UserId u) const;
  const std::vector<QueryId>& queries_with_category(CategoryId c) const;
  int price_bucket(ItemId id) const;
  double mean_log_price() const { return mean_log_price_; }

 private:
  std::vector<std::vector<ItemId>> relevant_by_query_;
  std::vector<std::vector<CategoryId>> user_top_categories_;
  std::vector<std::vector<QueryId>> queries_by_category_;
  double mean_log_price_ = 0.0;
};

World generate_world(const WorldConfig& config);

double dot(std::span<const double> a, std::span<const double> b);

bool relevance_oracle(const World& world, QueryId query_id, ItemId item_id);

/// User-item preference used by the click and purchase stages.
double affinity(const World& world, UserId user_id, ItemId item_id);
double click_probability(const World& world, UserId user_id, ItemId item_id);
double purchase_probability(const World& world, UserId user_id, ItemId item_id);

/// Returns nullopt when the query has no retrievable relevant candidate.
std::optional<PageView> simulate_page_view(const World& world, UserId user_id,
                                           QueryId query_id, Rng& rng, double ts = 0.0);

BehaviorHistory partition_behaviors(const SynthUser& user, double now);

/// Draws the query a user issues: mostly from the user's preferred
/// categories, otherwise by global popularity.
QueryId pick_query(const World& world, UserId user_id, Rng& rng);

struct LogSimulation {
  std::vector<PageView> pages;
  int requested = 0;
  int skipped_empty = 0;
};

/// Simulates `count` page-view requests on stream `stream` of the world seed.
LogSimulation simulate_logs(const World& world, int count, std::uint64_t stream);

/// A purchase made outside search: an item relevant to the query, drawn by
/// the user's click-and-purchase propensity. nullopt if the query has no
/// relevant items.
std::optional<ItemId> simulate_offsite_purchase(const World& world, UserId user_id,
                                                QueryId query_id, Rng& rng);

/// Fills every item's stats with log1p-scaled impression, click and
/// purchase counts observed in `pages`.
void accumulate_item_stats(World& world, std::span<const PageView> pages);

}  // namespace moppr
