#include "moppr/world.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace moppr {

namespace {

constexpr std::uint64_t kStreamWorld = 0x776f726c64ULL;
constexpr double kTopCategoryShare = 0.7;
constexpr int kTopCategories = 3;
constexpr double kTermSharpness = 4.0;
constexpr double kHistorySharpness = 5.0;
constexpr double kMaxHistoryAgeDays = 40.0;

void require_positive(int v, const char* name) {
  if (v <= 0) throw InvalidConfig(std::string("world config: ") + name + " must be >= 1");
}

std::vector<double> gaussian_vector(Rng& rng, int dim, double scale) {
  std::vector<double> v(dim);
  const double s = scale / std::sqrt(static_cast<double>(dim));
  for (double& x : v) x = normal01(rng) * s;
  return v;
}

void normalize(std::vector<double>& v) {
  double n = std::sqrt(dot(v, v));
  if (n == 0.0) return;
  for (double& x : v) x /= n;
}

std::vector<double> add(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Draws an index with probability proportional to weights (all >= 0).
std::size_t sample_weighted(Rng& rng, std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  if (!(total > 0.0)) return static_cast<std::size_t>(uniform_index(rng, static_cast<std::int64_t>(weights.size())));
  double r = uniform01(rng) * total;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    r -= weights[i];
    if (r < 0.0) return i;
  }
  return weights.size() - 1;
}

/// Softmax-weighted pick among `pool` by affinity to `target`.
template <class LatentOf>
std::int32_t pick_by_affinity(Rng& rng, const std::vector<std::int32_t>& pool,
                              const std::vector<double>& target, double sharpness,
                              LatentOf latent_of) {
  std::vector<double> w(pool.size());
  double best = -1e300;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    w[i] = sharpness * dot(latent_of(pool[i]), target);
    best = std::max(best, w[i]);
  }
  for (double& x : w) x = std::exp(x - best);
  return pool[sample_weighted(rng, w)];
}

}  // namespace

void WorldConfig::validate() const {
  require_positive(num_users, "num_users");
  require_positive(num_queries, "num_queries");
  require_positive(num_items, "num_items");
  require_positive(num_categories, "num_categories");
  require_positive(num_super_categories, "num_super_categories");
  require_positive(latent_dim, "latent_dim");
  require_positive(vocab_size, "vocab_size");
  require_positive(num_brands, "num_brands");
  require_positive(num_sellers, "num_sellers");
  require_positive(page_size_N, "page_size_N");
  require_positive(underimpression_pool, "underimpression_pool");
  require_positive(behavior_history_len, "behavior_history_len");
  require_positive(max_query_terms, "max_query_terms");
  require_positive(title_len, "title_len");
  if (logged_underimpressions < 0) throw InvalidConfig("world config: logged_underimpressions must be >= 0");
  if (underimpression_skip < 0) throw InvalidConfig("world config: underimpression_skip must be >= 0");
  if (page_size_N > num_items) throw InvalidConfig("world config: page_size_N exceeds num_items");
  if (irrelevant_exposure_rate < 0.0) throw InvalidConfig("world config: irrelevant_exposure_rate must be >= 0");
}

int PageView::clicks() const {
  return static_cast<int>(std::count_if(impressions.begin(), impressions.end(),
                                        [](const Impression& i) { return i.clicked; }));
}

int PageView::purchases() const {
  return static_cast<int>(std::count_if(impressions.begin(), impressions.end(),
                                        [](const Impression& i) { return i.purchased; }));
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

const CatalogItem& World::item(ItemId id) const {
  if (!has_item(id)) throw NotFound("unknown item id " + std::to_string(id));
  return items[static_cast<std::size_t>(id)];
}

const SynthUser& World::user(UserId id) const {
  if (id < 0 || id >= static_cast<UserId>(users.size())) throw NotFound("unknown user id " + std::to_string(id));
  return users[static_cast<std::size_t>(id)];
}

const SynthQuery& World::query(QueryId id) const {
  if (id < 0 || id >= static_cast<QueryId>(queries.size())) throw NotFound("unknown query id " + std::to_string(id));
  return queries[static_cast<std::size_t>(id)];
}

const std::vector<ItemId>& World::relevant_items(QueryId q) const {
  query(q);
  return relevant_by_query_[static_cast<std::size_t>(q)];
}

const std::vector<CategoryId>& World::user_top_categories(UserId u) const {
  user(u);
  return user_top_categories_[static_cast<std::size_t>(u)];
}

const std::vector<QueryId>& World::queries_with_category(CategoryId c) const {
  static const std::vector<QueryId> kEmpty;
  if (c < 0 || c >= static_cast<CategoryId>(queries_by_category_.size())) return kEmpty;
  return queries_by_category_[static_cast<std::size_t>(c)];
}

int World::price_bucket(ItemId id) const {
  const double lp = std::log(item(id).price);
  const int b = static_cast<int>(std::floor((lp - (mean_log_price_ - 2.5)) / 0.5));
  return std::clamp(b, 0, kPriceBuckets - 1);
}

void World::finalize() {
  const int C = config.num_categories;
  const int D = config.latent_dim;

  std::vector<std::vector<ItemId>> by_cat(C);
  std::vector<std::vector<double>> centroid(C, std::vector<double>(D, 0.0));
  double log_price_sum = 0.0;
  for (const CatalogItem& it : items) {
    by_cat[static_cast<std::size_t>(it.category)].push_back(it.id);
    for (int k = 0; k < D; ++k) centroid[it.category][k] += it.latent[k];
    log_price_sum += std::log(it.price);
  }
  mean_log_price_ = items.empty() ? 0.0 : log_price_sum / static_cast<double>(items.size());

  relevant_by_query_.assign(queries.size(), {});
  queries_by_category_.assign(C, {});
  for (const SynthQuery& q : queries) {
    auto& rel = relevant_by_query_[static_cast<std::size_t>(q.id)];
    for (CategoryId c : q.relevant_categories) {
      queries_by_category_[static_cast<std::size_t>(c)].push_back(q.id);
      for (ItemId i : by_cat[static_cast<std::size_t>(c)]) {
        if (dot(q.latent, items[i].latent) >= config.relevance_threshold) rel.push_back(i);
      }
    }
    std::sort(rel.begin(), rel.end());
    rel.erase(std::unique(rel.begin(), rel.end()), rel.end());
  }

  user_top_categories_.assign(users.size(), {});
  for (const SynthUser& u : users) {
    std::vector<std::pair<double, CategoryId>> scored;
    for (CategoryId c = 0; c < C; ++c) {
      if (by_cat[c].empty()) continue;
      scored.emplace_back(dot(u.latent, centroid[c]) / static_cast<double>(by_cat[c].size()), c);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    auto& top = user_top_categories_[static_cast<std::size_t>(u.id)];
    for (const auto& [s, c] : scored) top.push_back(c);
  }
}

World generate_world(const WorldConfig& config) {
  config.validate();
  Rng rng = make_rng(config.seed, {kStreamWorld});
  const int C = config.num_categories;
  const int D = config.latent_dim;
  const int S = std::min(config.num_super_categories, C);

  World world;
  world.config = config;

  std::vector<std::vector<double>> supers(S);
  for (auto& s : supers) {
    s = gaussian_vector(rng, D, 1.0);
    normalize(s);
  }
  std::vector<std::vector<double>> centers(C);
  for (int c = 0; c < C; ++c) {
    centers[c] = add(supers[c % S], gaussian_vector(rng, D, config.category_noise));
    normalize(centers[c]);
  }

  // Terms are owned by category t % C and sit near that category's center.
  std::vector<std::vector<double>> term_latent(config.vocab_size);
  std::vector<std::vector<TermId>> terms_by_cat(C);
  for (TermId t = 0; t < config.vocab_size; ++t) {
    term_latent[t] = add(centers[t % C], gaussian_vector(rng, D, config.item_noise));
    normalize(term_latent[t]);
    terms_by_cat[t % C].push_back(t);
  }
  std::vector<TermId> all_terms(config.vocab_size);
  std::iota(all_terms.begin(), all_terms.end(), 0);
  auto term_pool = [&](CategoryId c) -> const std::vector<TermId>& {
    return terms_by_cat[c].empty() ? all_terms : terms_by_cat[c];
  };
  auto term_lat = [&](TermId t) -> const std::vector<double>& { return term_latent[t]; };

  std::vector<double> cat_log_price(C);
  for (double& p : cat_log_price) p = 3.0 + 0.7 * normal01(rng);
  const int brands_per_cat = std::max(1, config.num_brands / C);

  world.items.resize(config.num_items);
  std::vector<std::vector<ItemId>> items_by_cat(C);
  for (ItemId i = 0; i < config.num_items; ++i) {
    CatalogItem& it = world.items[i];
    it.id = i;
    it.category = static_cast<CategoryId>(uniform_index(rng, C));
    it.latent = add(centers[it.category], gaussian_vector(rng, D, config.item_noise));
    normalize(it.latent);
    it.price = std::exp(cat_log_price[it.category] + 0.5 * normal01(rng));
    it.brand = static_cast<std::int32_t>((it.category * brands_per_cat + uniform_index(rng, brands_per_cat)) %
                                         config.num_brands);
    it.seller = static_cast<std::int32_t>(uniform_index(rng, config.num_sellers));
    it.title_terms.resize(config.title_len);
    for (TermId& t : it.title_terms) t = pick_by_affinity(rng, term_pool(it.category), it.latent, kTermSharpness, term_lat);
    items_by_cat[it.category].push_back(i);
  }

  // Query popularity follows a Zipf law over a random rank permutation.
  std::vector<int> rank(config.num_queries);
  std::iota(rank.begin(), rank.end(), 0);
  shuffle(rank.begin(), rank.end(), rng);
  world.queries.resize(config.num_queries);
  for (QueryId q = 0; q < config.num_queries; ++q) {
    SynthQuery& sq = world.queries[q];
    sq.id = q;
    const auto primary = static_cast<CategoryId>(uniform_index(rng, C));
    sq.relevant_categories.push_back(primary);
    if (C > S && uniform01(rng) < 0.3) {
      // A sibling category under the same super-category.
      const int siblings = (C - 1 - primary % S) / S + 1;
      const auto other = static_cast<CategoryId>(primary % S + S * uniform_index(rng, siblings));
      if (other != primary) sq.relevant_categories.push_back(other);
    }
    std::sort(sq.relevant_categories.begin(), sq.relevant_categories.end());
    sq.latent = add(centers[primary], gaussian_vector(rng, D, config.query_noise));
    normalize(sq.latent);
    const int n_terms = 1 + static_cast<int>(uniform_index(rng, config.max_query_terms));
    sq.terms.resize(n_terms);
    for (TermId& t : sq.terms) t = pick_by_affinity(rng, term_pool(primary), sq.latent, kTermSharpness, term_lat);
    sq.popularity = 1.0 / std::pow(rank[q] + 1.0, 0.8);
    sq.freq_bucket = std::min(kQueryFreqBuckets - 1, static_cast<int>(std::floor(std::log2(rank[q] + 1.0))));
  }

  std::vector<std::vector<double>> age_dir(kAgeBands), gender_dir(kGenderBands);
  for (auto& v : age_dir) v = gaussian_vector(rng, D, 1.0);
  for (auto& v : gender_dir) v = gaussian_vector(rng, D, 1.0);

  auto item_lat = [&](ItemId i) -> const std::vector<double>& { return world.items[i].latent; };
  world.users.resize(config.num_users);
  for (UserId u = 0; u < config.num_users; ++u) {
    SynthUser& su = world.users[u];
    su.id = u;
    su.profile.age_band = static_cast<int>(uniform_index(rng, kAgeBands));
    su.profile.gender_band = static_cast<int>(uniform_index(rng, kGenderBands));
    su.profile.power_level = static_cast<int>(uniform_index(rng, kPowerLevels));
    su.latent = gaussian_vector(rng, D, 1.0);
    for (int k = 0; k < D; ++k)
      su.latent[k] += 0.4 * age_dir[su.profile.age_band][k] + 0.4 * gender_dir[su.profile.gender_band][k];
    normalize(su.latent);

    std::vector<std::pair<double, CategoryId>> cat_aff;
    for (CategoryId c = 0; c < C; ++c)
      if (!items_by_cat[c].empty()) cat_aff.emplace_back(dot(su.latent, centers[c]), c);
    std::sort(cat_aff.begin(), cat_aff.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    const int top = std::min<int>(kTopCategories, static_cast<int>(cat_aff.size()));

    su.history.resize(config.behavior_history_len);
    for (BehaviorEvent& ev : su.history) {
      if (uniform01(rng) < kTopCategoryShare) {
        const CategoryId c = cat_aff[uniform_index(rng, top)].second;
        ev.item = pick_by_affinity(rng, items_by_cat[c], su.latent, kHistorySharpness, item_lat);
      } else {
        ev.item = static_cast<ItemId>(uniform_index(rng, config.num_items));
      }
      const double r = uniform01(rng);
      ev.type = r < 0.6 ? BehaviorType::Click
                : r < 0.75 ? BehaviorType::Collect
                : r < 0.9 ? BehaviorType::Cart
                          : BehaviorType::Purchase;
      ev.day = -uniform01(rng) * kMaxHistoryAgeDays;
    }
    std::stable_sort(su.history.begin(), su.history.end(),
                     [](const BehaviorEvent& a, const BehaviorEvent& b) { return a.day > b.day; });
  }

  world.finalize();
  return world;
}

bool relevance_oracle(const World& world, QueryId query_id, ItemId item_id) {
  const SynthQuery& q = world.query(query_id);
  const CatalogItem& it = world.item(item_id);
  if (!std::binary_search(q.relevant_categories.begin(), q.relevant_categories.end(), it.category)) return false;
  return dot(q.latent, it.latent) >= world.config.relevance_threshold;
}

double affinity(const World& world, UserId user_id, ItemId item_id) {
  return 0.5 * (1.0 + dot(world.user(user_id).latent, world.item(item_id).latent));
}

double click_probability(const World& world, UserId user_id, ItemId item_id) {
  const double logit = world.config.click_scale * affinity(world, user_id, item_id) + world.config.click_bias;
  return std::isnan(logit) ? 0.0 : sigmoid(logit);
}

double purchase_probability(const World& world, UserId user_id, ItemId item_id) {
  const WorldConfig& cfg = world.config;
  const double price_penalty =
      cfg.purchase_bias + cfg.price_sensitivity * (std::log(world.item(item_id).price) - world.mean_log_price());
  const double logit = cfg.purchase_scale * affinity(world, user_id, item_id) - price_penalty;
  return std::isnan(logit) ? 0.0 : sigmoid(logit);
}

std::optional<PageView> simulate_page_view(const World& world, UserId user_id, QueryId query_id,
                                           Rng& rng, double ts) {
  const SynthUser& user = world.user(user_id);
  const SynthQuery& query = world.query(query_id);
  const WorldConfig& cfg = world.config;
  const std::vector<ItemId>& relevant = world.relevant_items(query_id);
  if (relevant.empty()) return std::nullopt;

  struct Candidate {
    ItemId item;
    bool relevant;
    double score;
  };
  std::vector<Candidate> cands;
  cands.reserve(relevant.size() + 8);
  for (ItemId i : relevant) cands.push_back({i, true, 0.0});

  // Ranker noise: a few oracle-irrelevant items make it into the retrieved list.
  const double expected_noise = cfg.irrelevant_exposure_rate * static_cast<double>(relevant.size());
  int n_noise = static_cast<int>(std::floor(expected_noise));
  if (uniform01(rng) < expected_noise - n_noise) ++n_noise;
  if (relevant.size() < world.items.size()) {
    for (int k = 0; k < n_noise; ++k) {
      for (int attempt = 0; attempt < 64; ++attempt) {
        const auto i = static_cast<ItemId>(uniform_index(rng, static_cast<std::int64_t>(world.items.size())));
        if (!std::binary_search(relevant.begin(), relevant.end(), i)) {
          cands.push_back({i, false, 0.0});
          break;
        }
      }
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.item < b.item; });
  cands.erase(std::unique(cands.begin(), cands.end(),
                          [](const Candidate& a, const Candidate& b) { return a.item == b.item; }),
              cands.end());

  std::vector<double> intent(user.latent.size());
  for (std::size_t k = 0; k < intent.size(); ++k) intent[k] = user.latent[k] + query.latent[k];
  for (Candidate& c : cands) c.score = dot(intent, world.items[c.item].latent) + cfg.ranker_noise * normal01(rng);
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    return a.score != b.score ? a.score > b.score : a.item < b.item;
  });

  PageView pv;
  pv.user_id = user_id;
  pv.query_id = query_id;
  pv.ts = ts;

  // Relevance gate: only relevant candidates can be exposed.
  std::vector<Candidate> rest;
  for (const Candidate& c : cands) {
    if (c.relevant && static_cast<int>(pv.impressions.size()) < cfg.page_size_N) {
      pv.impressions.push_back({c.item, false, false, true});
    } else {
      rest.push_back(c);
    }
  }
  pv.short_page = static_cast<int>(pv.impressions.size()) < cfg.page_size_N;

  for (Impression& imp : pv.impressions) {
    imp.clicked = uniform01(rng) < click_probability(world, user_id, imp.item);
    if (imp.clicked) imp.purchased = uniform01(rng) < purchase_probability(world, user_id, imp.item);
  }

  // Under-impressions: sampled uniformly from the unexposed candidates
  // ranked after the skip window.
  const std::size_t lo = std::min<std::size_t>(rest.size(), cfg.underimpression_skip);
  const std::size_t hi = std::min<std::size_t>(rest.size(), lo + cfg.underimpression_pool);
  std::vector<std::size_t> pool(hi - lo);
  std::iota(pool.begin(), pool.end(), lo);
  const std::size_t take = std::min<std::size_t>(pool.size(), static_cast<std::size_t>(cfg.logged_underimpressions));
  for (std::size_t k = 0; k < take; ++k) {
    const auto j = k + static_cast<std::size_t>(uniform_index(rng, static_cast<std::int64_t>(pool.size() - k)));
    std::swap(pool[k], pool[j]);
    pv.under_impressions.push_back({rest[pool[k]].item, rest[pool[k]].relevant});
  }
  return pv;
}

BehaviorHistory partition_behaviors(const SynthUser& user, double now) {
  BehaviorHistory h;
  for (const BehaviorEvent& ev : user.history) {
    const double age = now - ev.day;
    if (age < 0.0) continue;
    if (age <= 1.0) {
      h.realtime.push_back(ev.item);
    } else if (age <= 10.0) {
      h.short_term.push_back(ev.item);
    } else if (age <= 30.0) {
      h.long_term.push_back(ev.item);
    }
  }
  return h;
}

QueryId pick_query(const World& world, UserId user_id, Rng& rng) {
  const auto& top = world.user_top_categories(user_id);
  if (!top.empty() && uniform01(rng) < kTopCategoryShare) {
    const int n = std::min<int>(kTopCategories, static_cast<int>(top.size()));
    const auto& qs = world.queries_with_category(top[uniform_index(rng, n)]);
    if (!qs.empty()) {
      std::vector<double> w(qs.size());
      for (std::size_t k = 0; k < qs.size(); ++k) w[k] = world.queries[qs[k]].popularity;
      return qs[sample_weighted(rng, w)];
    }
  }
  std::vector<double> w(world.queries.size());
  for (std::size_t k = 0; k < w.size(); ++k) w[k] = world.queries[k].popularity;
  return static_cast<QueryId>(sample_weighted(rng, w));
}

LogSimulation simulate_logs(const World& world, int count, std::uint64_t stream) {
  LogSimulation sim;
  sim.requested = count;
  Rng rng = make_rng(world.config.seed, {kStreamWorld, stream});
  for (int n = 0; n < count; ++n) {
    const auto u = static_cast<UserId>(uniform_index(rng, static_cast<std::int64_t>(world.users.size())));
    const QueryId q = pick_query(world, u, rng);
    const double ts = uniform01(rng);
    auto pv = simulate_page_view(world, u, q, rng, ts);
    if (pv) {
      sim.pages.push_back(std::move(*pv));
    } else {
      ++sim.skipped_empty;
    }
  }
  return sim;
}

std::optional<ItemId> simulate_offsite_purchase(const World& world, UserId user_id, QueryId query_id, Rng& rng) {
  const auto& rel = world.relevant_items(query_id);
  if (rel.empty()) return std::nullopt;
  std::vector<double> w(rel.size());
  for (std::size_t k = 0; k < rel.size(); ++k)
    w[k] = click_probability(world, user_id, rel[k]) * purchase_probability(world, user_id, rel[k]);
  return rel[sample_weighted(rng, w)];
}

void accumulate_item_stats(World& world, std::span<const PageView> pages) {
  std::vector<std::array<double, kItemStats>> counts(world.items.size(), {0.0, 0.0, 0.0});
  for (const PageView& pv : pages) {
    for (const Impression& imp : pv.impressions) {
      auto& c = counts.at(static_cast<std::size_t>(imp.item));
      c[0] += 1.0;
      if (imp.clicked) c[1] += 1.0;
      if (imp.purchased) c[2] += 1.0;
    }
  }
  for (std::size_t i = 0; i < world.items.size(); ++i)
    for (int k = 0; k < kItemStats; ++k) world.items[i].stats[k] = static_cast<float>(std::log1p(counts[i][k]));
}

}  // namespace moppr
