#include "moppr/features.hpp"

#include <algorithm>

namespace moppr {

FeatureSpace FeatureSpace::from_world(const WorldConfig& c) {
  return {c.num_users, c.num_queries, c.num_items, c.num_categories, c.num_brands, c.num_sellers, c.vocab_size};
}

bool operator==(const FeatureSpace& a, const FeatureSpace& b) {
  return a.num_users == b.num_users && a.num_queries == b.num_queries && a.num_items == b.num_items &&
         a.num_categories == b.num_categories && a.num_brands == b.num_brands && a.num_sellers == b.num_sellers &&
         a.vocab_size == b.vocab_size;
}

ItemFeatures item_features(const World& world, ItemId id) {
  const CatalogItem& it = world.item(id);
  return {it.id, it.category, it.brand, it.seller, world.price_bucket(id), it.title_terms, it.stats};
}

BehaviorHistory category_filter(const BehaviorHistory& behaviors, const World& world,
                                std::span<const CategoryId> relevant_categories) {
  auto keep = [&](const std::vector<ItemId>& in) {
    std::vector<ItemId> out;
    for (ItemId i : in) {
      const CategoryId c = world.item(i).category;
      if (std::find(relevant_categories.begin(), relevant_categories.end(), c) != relevant_categories.end())
        out.push_back(i);
    }
    return out;
  };
  return {keep(behaviors.realtime), keep(behaviors.short_term), keep(behaviors.long_term)};
}

UserQueryFeatures user_query_features(const World& world, const UserFeatures& user, const QueryFeatures& query) {
  UserQueryFeatures f;
  f.user = user.user;
  f.profile = user.profile;
  f.query = query.query;
  f.freq_bucket = query.freq_bucket;
  f.terms = query.terms;
  f.relevant_categories = query.relevant_categories;
  const BehaviorHistory filtered = category_filter(user.behaviors, world, query.relevant_categories);
  const std::vector<ItemId>* parts[kPartitions] = {&filtered.realtime, &filtered.short_term, &filtered.long_term};
  for (int p = 0; p < kPartitions; ++p) {
    for (ItemId i : *parts[p]) {
      const CatalogItem& it = world.item(i);
      f.behaviors[p].push_back({it.id, it.category, it.brand});
    }
  }
  return f;
}

}  // namespace moppr
