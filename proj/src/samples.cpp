#include "moppr/samples.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <unordered_set>

namespace moppr {

using nlohmann::json;

namespace {

void check_items(const PageView& pv, const World& world) {
  for (const Impression& i : pv.impressions)
    if (!world.has_item(i.item)) throw DataIntegrity("page view references unknown item " + std::to_string(i.item));
  for (const UnderImpression& u : pv.under_impressions)
    if (!world.has_item(u.item)) throw DataIntegrity("page view references unknown item " + std::to_string(u.item));
}

TrainingSample sample_header(const PageView& pv, const World& world) {
  TrainingSample s;
  s.user = make_user_features(world, pv.user_id, pv.ts);
  s.query = make_query_features(world, pv.query_id);
  s.ts = pv.ts;
  return s;
}

void push_slot(TrainingSample& s, ItemId item, bool active, std::array<bool, kNumObjectives> labels) {
  s.item_slots.push_back(item);
  s.mask.push_back(active ? 1 : 0);
  for (int o = 0; o < kNumObjectives; ++o) s.labels.values[o].push_back(labels[o] ? 1 : 0);
}

void append_random_negatives(TrainingSample& s, const World& world, int count, Rng& rng) {
  s.n_random_slots = count;
  const auto n_items = static_cast<std::int64_t>(world.items.size());
  for (int k = 0; k < count; ++k)
    push_slot(s, static_cast<ItemId>(uniform_index(rng, n_items)), true, {false, false, false, false});
}

bool behaviors_equal(const BehaviorHistory& a, const BehaviorHistory& b) {
  return a.realtime == b.realtime && a.short_term == b.short_term && a.long_term == b.long_term;
}

}  // namespace

void SampleConfig::validate() const {
  if (n_impressions < 1) throw InvalidConfig("sample config: n_impressions must be >= 1");
  if (m_underimpressions < 0) throw InvalidConfig("sample config: m_underimpressions must be >= 0");
  if (rand_neg_per_sample < 0) throw InvalidConfig("sample config: rand_neg_per_sample must be >= 0");
  if (batch_size_B < 1) throw InvalidConfig("sample config: batch_size_B must be >= 1");
  if (min_clicks_filter < 0) throw InvalidConfig("sample config: min_clicks_filter must be >= 0");
  if (extra_hard_negatives < 0) throw InvalidConfig("sample config: extra_hard_negatives must be >= 0");
}

void ObjectiveLabels::resize(std::size_t n) {
  for (auto& v : values) v.resize(n, 0);
}

UserFeatures make_user_features(const World& world, UserId user, double now) {
  const SynthUser& u = world.user(user);
  return {u.id, u.profile, partition_behaviors(u, now)};
}

QueryFeatures make_query_features(const World& world, QueryId query) {
  const SynthQuery& q = world.query(query);
  return {q.id, q.terms, q.freq_bucket, q.relevant_categories};
}

bool operator==(const TrainingSample& a, const TrainingSample& b) {
  return a.user.user == b.user.user && a.user.profile.age_band == b.user.profile.age_band &&
         a.user.profile.gender_band == b.user.profile.gender_band &&
         a.user.profile.power_level == b.user.profile.power_level &&
         behaviors_equal(a.user.behaviors, b.user.behaviors) && a.query.query == b.query.query &&
         a.query.terms == b.query.terms && a.query.freq_bucket == b.query.freq_bucket &&
         a.query.relevant_categories == b.query.relevant_categories && a.ts == b.ts &&
         a.n_impression_slots == b.n_impression_slots && a.n_under_slots == b.n_under_slots &&
         a.n_random_slots == b.n_random_slots && a.n_hard_slots == b.n_hard_slots && a.item_slots == b.item_slots &&
         a.mask == b.mask && a.labels.values == b.labels.values;
}

std::optional<TrainingSample> build_sample(const PageView& pv, const World& world, const SampleConfig& config,
                                           Rng& rng, const HardNegativePool* hard_pool) {
  check_items(pv, world);
  if (pv.clicks() < config.min_clicks_filter) return std::nullopt;

  TrainingSample s = sample_header(pv, world);
  s.n_impression_slots = config.n_impressions;
  for (int k = 0; k < config.n_impressions; ++k) {
    if (k < static_cast<int>(pv.impressions.size())) {
      const Impression& imp = pv.impressions[k];
      const bool active = !(config.drop_non_clicked_impressions && !imp.clicked);
      push_slot(s, imp.item, active, {imp.relevant, true, imp.clicked, imp.purchased});
    } else {
      push_slot(s, kPadItem, false, {false, false, false, false});
    }
  }

  // M under-impressions drawn without replacement from the logged set.
  s.n_under_slots = config.m_underimpressions;
  std::vector<std::size_t> order(pv.under_impressions.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  const std::size_t take = std::min<std::size_t>(order.size(), static_cast<std::size_t>(config.m_underimpressions));
  for (std::size_t k = 0; k < take; ++k) {
    const auto j = k + static_cast<std::size_t>(uniform_index(rng, static_cast<std::int64_t>(order.size() - k)));
    std::swap(order[k], order[j]);
  }
  for (int k = 0; k < config.m_underimpressions; ++k) {
    if (static_cast<std::size_t>(k) < take) {
      const UnderImpression& u = pv.under_impressions[order[k]];
      push_slot(s, u.item, !config.drop_under_impressions, {u.relevant, false, false, false});
    } else {
      push_slot(s, kPadItem, false, {false, false, false, false});
    }
  }

  append_random_negatives(s, world, config.rand_neg_per_sample, rng);

  if (config.extra_hard_negatives > 0 && hard_pool != nullptr) {
    auto it = hard_pool->find(pv.query_id);
    if (it != hard_pool->end() && !it->second.empty()) {
      std::vector<ItemId> pool = it->second;
      const int take_hard = std::min<int>(config.extra_hard_negatives, static_cast<int>(pool.size()));
      for (int k = 0; k < take_hard; ++k) {
        const auto j = k + uniform_index(rng, static_cast<std::int64_t>(pool.size()) - k);
        std::swap(pool[k], pool[j]);
        push_slot(s, pool[k], true, {false, false, false, false});
      }
      s.n_hard_slots = take_hard;
    }
  }
  return s;
}

std::vector<TrainingSample> build_single_positive_samples(const PageView& pv, const World& world,
                                                          const SampleConfig& config, Rng& rng) {
  check_items(pv, world);
  std::vector<TrainingSample> out;
  if (pv.clicks() < config.min_clicks_filter) return out;
  for (const Impression& imp : pv.impressions) {
    if (!imp.clicked) continue;
    TrainingSample s = sample_header(pv, world);
    s.n_impression_slots = 1;
    push_slot(s, imp.item, true, {imp.relevant, true, true, imp.purchased});
    append_random_negatives(s, world, config.rand_neg_per_sample, rng);
    out.push_back(std::move(s));
  }
  return out;
}

std::size_t Batch::candidate_count(std::size_t s) const {
  const TrainingSample& ts = samples.at(s);
  std::size_t n = static_cast<std::size_t>(ts.own_slot_count() + ts.n_hard_slots) + shared_negatives.size();
  if (s < online_negatives.size()) n += online_negatives[s].size();
  return n;
}

Batch assemble_batch(std::vector<TrainingSample> samples, const SampleConfig& config) {
  if (static_cast<int>(samples.size()) != config.batch_size_B)
    throw BatchSizeError("batch needs " + std::to_string(config.batch_size_B) + " samples, got " +
                         std::to_string(samples.size()));
  Batch batch;
  batch.samples = std::move(samples);
  for (const TrainingSample& s : batch.samples) {
    auto negs = s.random_negatives();
    batch.shared_negatives.insert(batch.shared_negatives.end(), negs.begin(), negs.end());
  }
  batch.shared_mask.reserve(batch.samples.size());
  for (const TrainingSample& s : batch.samples) {
    std::unordered_set<ItemId> own;
    for (int k = 0; k < s.own_slot_count(); ++k)
      if (s.item_slots[k] != kPadItem) own.insert(s.item_slots[k]);
    for (int k = 0; k < s.n_hard_slots; ++k) own.insert(s.item_slots[s.hard_begin() + k]);
    std::vector<std::uint8_t> mask(batch.shared_negatives.size(), 1);
    for (std::size_t j = 0; j < mask.size(); ++j)
      if (own.count(batch.shared_negatives[j])) mask[j] = 0;
    batch.shared_mask.push_back(std::move(mask));
  }
  return batch;
}

Batch extend_online_hard(Batch batch, const SampleConfig& config) {
  if (!config.online_hard_mining) return batch;
  const std::size_t B = batch.samples.size();
  batch.online_negatives.assign(B, {});
  for (std::size_t s = 0; s < B; ++s) {
    const TrainingSample& self = batch.samples[s];
    std::unordered_set<ItemId> own(self.item_slots.begin(), self.item_slots.end());
    for (std::size_t t = 0; t < B; ++t) {
      if (t == s) continue;
      const TrainingSample& other = batch.samples[t];
      for (int k = 0; k < other.n_impression_slots; ++k) {
        const ItemId item = other.item_slots[k];
        if (item == kPadItem || !other.mask[k] || own.count(item)) continue;
        batch.online_negatives[s].push_back(item);
      }
    }
  }
  return batch;
}

std::vector<ItemId> mine_hard_negatives(std::span<const PageView> logs, const World& world, QueryId query_id, int k) {
  std::vector<ItemId> out;
  if (k <= 0) return out;
  std::set<ItemId> seen;
  auto consider = [&](ItemId item, bool logged_relevant) {
    if (static_cast<int>(out.size()) >= k || logged_relevant || seen.count(item)) return;
    if (relevance_oracle(world, query_id, item)) return;
    seen.insert(item);
    out.push_back(item);
  };
  for (const PageView& pv : logs) {
    if (pv.query_id != query_id) continue;
    for (const Impression& i : pv.impressions) consider(i.item, i.relevant);
    for (const UnderImpression& u : pv.under_impressions) consider(u.item, u.relevant);
    if (static_cast<int>(out.size()) >= k) break;
  }
  return out;
}

HardNegativePool build_hard_negative_pool(std::span<const PageView> logs, const World& world, int k) {
  HardNegativePool pool;
  if (k <= 0) return pool;
  std::map<QueryId, std::vector<const PageView*>> by_query;
  for (const PageView& pv : logs) by_query[pv.query_id].push_back(&pv);
  for (const auto& [q, pages] : by_query) {
    std::vector<PageView> subset;
    subset.reserve(pages.size());
    for (const PageView* p : pages) subset.push_back(*p);
    auto mined = mine_hard_negatives(subset, world, q, k);
    if (!mined.empty()) pool.emplace(q, std::move(mined));
  }
  return pool;
}

json sample_to_json(const TrainingSample& s) {
  const BehaviorHistory& b = s.user.behaviors;
  json labels = json::object();
  for (ObjectiveId o : kAllObjectives) labels[objective_name(o)] = s.labels[o];
  return {{"user",
           {{"id", s.user.user},
            {"profile", {s.user.profile.age_band, s.user.profile.gender_band, s.user.profile.power_level}},
            {"realtime", b.realtime},
            {"short_term", b.short_term},
            {"long_term", b.long_term}}},
          {"query",
           {{"id", s.query.query},
            {"terms", s.query.terms},
            {"freq_bucket", s.query.freq_bucket},
            {"relevant_categories", s.query.relevant_categories}}},
          {"ts", s.ts},
          {"slots",
           {{"impressions", s.n_impression_slots},
            {"under", s.n_under_slots},
            {"random", s.n_random_slots},
            {"hard", s.n_hard_slots}}},
          {"items", s.item_slots},
          {"mask", s.mask},
          {"labels", labels}};
}

TrainingSample sample_from_json(const json& j) {
  TrainingSample s;
  const json& u = j.at("user");
  s.user.user = u.at("id").get<UserId>();
  const auto prof = u.at("profile").get<std::array<int, 3>>();
  s.user.profile = {prof[0], prof[1], prof[2]};
  s.user.behaviors.realtime = u.at("realtime").get<std::vector<ItemId>>();
  s.user.behaviors.short_term = u.at("short_term").get<std::vector<ItemId>>();
  s.user.behaviors.long_term = u.at("long_term").get<std::vector<ItemId>>();
  const json& q = j.at("query");
  s.query.query = q.at("id").get<QueryId>();
  s.query.terms = q.at("terms").get<std::vector<TermId>>();
  s.query.freq_bucket = q.at("freq_bucket").get<int>();
  s.query.relevant_categories = q.at("relevant_categories").get<std::vector<CategoryId>>();
  s.ts = j.at("ts").get<double>();
  const json& sl = j.at("slots");
  s.n_impression_slots = sl.at("impressions").get<int>();
  s.n_under_slots = sl.at("under").get<int>();
  s.n_random_slots = sl.at("random").get<int>();
  s.n_hard_slots = sl.at("hard").get<int>();
  s.item_slots = j.at("items").get<std::vector<ItemId>>();
  s.mask = j.at("mask").get<std::vector<std::uint8_t>>();
  for (ObjectiveId o : kAllObjectives) s.labels[o] = j.at("labels").at(objective_name(o)).get<std::vector<std::uint8_t>>();
  const std::size_t n = s.item_slots.size();
  if (static_cast<std::size_t>(s.own_slot_count() + s.n_random_slots + s.n_hard_slots) != n || s.mask.size() != n)
    throw DataIntegrity("sample slot counts do not match item list");
  for (const auto& v : s.labels.values)
    if (v.size() != n) throw DataIntegrity("sample label vector length mismatch");
  return s;
}

void write_sample_shard(const std::filesystem::path& path, std::span<const TrainingSample> samples) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const TrainingSample& s : samples) out << sample_to_json(s).dump() << '\n';
}

std::vector<TrainingSample> read_sample_shard(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<TrainingSample> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(sample_from_json(json::parse(line)));
  return out;
}

}  // namespace moppr
