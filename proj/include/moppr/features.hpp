#pragma once

#include <array>
#include <span>
#include <vector>

#include "moppr/common.hpp"
#include "moppr/samples.hpp"
#include "moppr/world.hpp"

namespace moppr {

/// Cardinalities of every categorical feature; sizes the embedding tables.
struct FeatureSpace {
  int num_users = 1;
  int num_queries = 1;
  int num_items = 1;
  int num_categories = 1;
  int num_brands = 1;
  int num_sellers = 1;
  int vocab_size = 1;

  static FeatureSpace from_world(const WorldConfig& config);
};

bool operator==(const FeatureSpace& a, const FeatureSpace& b);

struct ItemFeatures {
  ItemId id = 0;
  CategoryId category = 0;
  int brand = 0;
  int seller = 0;
  int price_bucket = 0;
  std::vector<TermId> title;
  std::array<float, kItemStats> stats{};
};

/// A behavior item as seen by the user-query tower: id plus side information.
struct BehaviorItem {
  ItemId id = 0;
  CategoryId category = 0;
  int brand = 0;
};

inline constexpr int kPartitions = 3;

struct UserQueryFeatures {
  UserId user = 0;
  UserProfile profile;
  QueryId query = 0;
  int freq_bucket = 0;
  std::vector<TermId> terms;
  std::vector<CategoryId> relevant_categories;
  /// realtime, short-term, long-term; already category-filtered.
  std::array<std::vector<BehaviorItem>, kPartitions> behaviors;
};

ItemFeatures item_features(const World& world, ItemId id);

/// Drops behaviors whose item category is not among the query's relevant
/// categories, independently per partition and preserving order.
BehaviorHistory category_filter(const BehaviorHistory& behaviors, const World& world,
                                std::span<const CategoryId> relevant_categories);

UserQueryFeatures user_query_features(const World& world, const UserFeatures& user, const QueryFeatures& query);

}  // namespace moppr
