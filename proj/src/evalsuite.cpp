#include "moppr/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "moppr/features.hpp"
#include "moppr/rng.hpp"
#include "moppr/samples.hpp"

namespace moppr {

namespace {

constexpr std::uint64_t kStreamOffsite = 0x6f666673ULL;
constexpr std::size_t kChunk = 2048;

}  // namespace

const char* source_name(RecordSource s) {
  switch (s) {
    case RecordSource::SearchClick: return "search_click";
    case RecordSource::SearchPurchase: return "search_purchase";
    case RecordSource::OffsitePurchase: return "offsite_purchase";
  }
  return "?";
}

RecordSource parse_source(const std::string& name) {
  for (int s = 0; s < kNumSources; ++s)
    if (name == source_name(static_cast<RecordSource>(s))) return static_cast<RecordSource>(s);
  throw InvalidInput("unknown record source: " + name);
}

void EvalConfig::validate() const {
  if (k < 0) throw InvalidConfig("eval config: k must be >= 0");
  if (heldout_pages < 0 || click_records < 0 || purchase_records < 0 || offsite_records < 0)
    throw InvalidConfig("eval config: record counts must be >= 0");
}

int resolve_k(int k, std::size_t catalog_size) {
  const int resolved = k > 0 ? k : std::max(50, static_cast<int>(std::ceil(0.05 * static_cast<double>(catalog_size))));
  if (static_cast<std::size_t>(resolved) > catalog_size)
    throw InvalidConfig("K = " + std::to_string(resolved) + " exceeds the catalog size " +
                        std::to_string(catalog_size));
  return resolved;
}

double recall_at_k(std::span<const ItemId> retrieved, std::span<const ItemId> targets) {
  if (targets.empty()) throw InvalidInput("evaluation record with no target items");
  const std::unordered_set<ItemId> t(targets.begin(), targets.end());
  std::unordered_set<ItemId> hit;
  for (ItemId i : retrieved)
    if (t.count(i)) hit.insert(i);
  return static_cast<double>(hit.size()) / static_cast<double>(t.size());
}

double ndcg_at_k(std::span<const ItemId> retrieved, std::span<const ItemId> targets) {
  if (targets.empty()) throw InvalidInput("evaluation record with no target items");
  if (retrieved.empty()) return 0.0;
  const std::unordered_set<ItemId> t(targets.begin(), targets.end());
  double dcg = 0.0;
  double ideal = 0.0;
  for (std::size_t k = 0; k < retrieved.size(); ++k) {
    const double discount = 1.0 / std::log2(static_cast<double>(k) + 2.0);
    ideal += discount;
    if (t.count(retrieved[k])) dcg += discount;
  }
  return dcg / ideal;
}

double p_good(std::span<const std::uint8_t> good) {
  if (good.empty()) return 0.0;
  long n = 0;
  for (std::uint8_t g : good) n += g ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(good.size());
}

double p_good(const World& world, QueryId query, std::span<const ItemId> retrieved) {
  std::vector<std::uint8_t> good(retrieved.size());
  for (std::size_t k = 0; k < retrieved.size(); ++k) good[k] = relevance_oracle(world, query, retrieved[k]) ? 1 : 0;
  return p_good(good);
}

std::vector<EvalRecord> build_eval_records(const World& world, std::span<const PageView> heldout,
                                           const EvalConfig& config) {
  config.validate();
  std::vector<EvalRecord> clicks, purchases, offsite;
  for (const PageView& pv : heldout) {
    EvalRecord c{pv.user_id, pv.query_id, pv.ts, {}, RecordSource::SearchClick};
    EvalRecord p{pv.user_id, pv.query_id, pv.ts, {}, RecordSource::SearchPurchase};
    for (const Impression& imp : pv.impressions) {
      if (imp.clicked) c.targets.push_back(imp.item);
      if (imp.purchased) p.targets.push_back(imp.item);
    }
    if (!c.targets.empty() && static_cast<int>(clicks.size()) < config.click_records) clicks.push_back(std::move(c));
    if (!p.targets.empty() && static_cast<int>(purchases.size()) < config.purchase_records)
      purchases.push_back(std::move(p));
  }
  Rng rng = make_rng(world.config.seed, {kStreamOffsite});
  const auto num_users = static_cast<std::int64_t>(world.users.size());
  // Bounded retries: a query without relevant items yields no purchase.
  for (long attempt = 0; static_cast<int>(offsite.size()) < config.offsite_records &&
                         attempt < 20L * std::max(1, config.offsite_records);
       ++attempt) {
    const auto u = static_cast<UserId>(uniform_index(rng, num_users));
    const QueryId q = pick_query(world, u, rng);
    const double ts = uniform01(rng);
    if (auto item = simulate_offsite_purchase(world, u, q, rng))
      offsite.push_back({u, q, ts, {*item}, RecordSource::OffsitePurchase});
  }
  std::vector<EvalRecord> out;
  out.reserve(clicks.size() + purchases.size() + offsite.size());
  for (auto* part : {&clicks, &purchases, &offsite})
    for (auto& r : *part) out.push_back(std::move(r));
  return out;
}

MetricsReport evaluate_embeddings(const Mat<float>& record_embs, const Mat<float>& item_embs,
                                  std::span<const EvalRecord> records, const World& world, int k) {
  if (record_embs.rows() != static_cast<Eigen::Index>(records.size()))
    throw InvalidInput("one record embedding per record is required");
  if (record_embs.cols() != item_embs.cols()) throw InvalidInput("record and item embedding widths differ");
  const auto n = static_cast<std::size_t>(item_embs.rows());
  k = resolve_k(k, n);
  MetricsReport rep;
  rep.k = k;
  if (records.empty()) return rep;

  const Mat<double> items = item_embs.cast<double>();
  double recall = 0.0, ndcg = 0.0, recall_p = 0.0, ndcg_p = 0.0, good = 0.0;
  long purchase_n = 0;
  std::vector<std::pair<double, ItemId>> scored(n);
  std::vector<ItemId> top(static_cast<std::size_t>(k));
  for (std::size_t r = 0; r < records.size(); ++r) {
    const EvalRecord& rec = records[r];
    const ColVec<double> s = items * record_embs.row(static_cast<Eigen::Index>(r)).cast<double>().transpose();
    for (std::size_t i = 0; i < n; ++i) scored[i] = {s(static_cast<Eigen::Index>(i)), static_cast<ItemId>(i)};
    std::partial_sort(scored.begin(), scored.begin() + k, scored.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    for (int j = 0; j < k; ++j) top[static_cast<std::size_t>(j)] = scored[static_cast<std::size_t>(j)].second;
    const double rc = recall_at_k(top, rec.targets);
    const double nd = ndcg_at_k(top, rec.targets);
    recall += rc;
    ndcg += nd;
    if (rec.purchase()) {
      recall_p += rc;
      ndcg_p += nd;
      ++purchase_n;
    }
    good += p_good(world, rec.query, top);
    ++rep.records[static_cast<int>(rec.source)];
  }
  const auto total = static_cast<double>(records.size());
  rep.recall = recall / total;
  rep.ndcg = ndcg / total;
  rep.p_good = good / total;
  if (purchase_n > 0) {
    rep.recall_p = recall_p / static_cast<double>(purchase_n);
    rep.ndcg_p = ndcg_p / static_cast<double>(purchase_n);
  }
  return rep;
}

Mat<float> embed_catalog(const Checkpoint& ckpt, const World& world) {
  const TwoTowerModel<float> model(ckpt.config, ckpt.space);
  if (!(ckpt.space == FeatureSpace::from_world(world.config)))
    throw InvalidInput("checkpoint feature space does not match the world");
  const std::size_t n = world.items.size();
  Mat<float> out(static_cast<Eigen::Index>(n), ckpt.config.out_dim);
  std::vector<ItemFeatures> feats;
  for (std::size_t begin = 0; begin < n; begin += kChunk) {
    const std::size_t end = std::min(n, begin + kChunk);
    feats.clear();
    for (std::size_t i = begin; i < end; ++i) feats.push_back(item_features(world, static_cast<ItemId>(i)));
    out.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin)) =
        model.item_forward(ckpt.params, feats);
  }
  return out;
}

Mat<float> embed_records(const Checkpoint& ckpt, const World& world, std::span<const EvalRecord> records) {
  const TwoTowerModel<float> model(ckpt.config, ckpt.space);
  Mat<float> out(static_cast<Eigen::Index>(records.size()), ckpt.config.out_dim);
  std::vector<UserQueryFeatures> feats;
  for (std::size_t begin = 0; begin < records.size(); begin += kChunk) {
    const std::size_t end = std::min(records.size(), begin + kChunk);
    feats.clear();
    for (std::size_t r = begin; r < end; ++r) {
      const EvalRecord& rec = records[r];
      feats.push_back(user_query_features(world, make_user_features(world, rec.user, rec.ts),
                                          make_query_features(world, rec.query)));
    }
    out.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin)) =
        model.user_query_forward(ckpt.params, feats);
  }
  return out;
}

MetricsReport evaluate(const Checkpoint& ckpt, std::span<const EvalRecord> records, const World& world, int k) {
  k = resolve_k(k, world.items.size());
  return evaluate_embeddings(embed_records(ckpt, world, records), embed_catalog(ckpt, world), records, world, k);
}

nlohmann::json report_to_json(const MetricsReport& r) {
  nlohmann::json counts;
  for (int s = 0; s < kNumSources; ++s) counts[source_name(static_cast<RecordSource>(s))] = r.records[s];
  return {{"k", r.k},           {"recall", r.recall}, {"ndcg", r.ndcg}, {"recall_p", r.recall_p},
          {"ndcg_p", r.ndcg_p}, {"p_good", r.p_good}, {"records", counts}};
}

std::string report_csv(const MetricsReport& r) {
  std::ostringstream out;
  out.precision(17);
  out << "k,recall,ndcg,recall_p,ndcg_p,p_good,search_click,search_purchase,offsite_purchase\n";
  out << r.k << ',' << r.recall << ',' << r.ndcg << ',' << r.recall_p << ',' << r.ndcg_p << ',' << r.p_good << ','
      << r.records[0] << ',' << r.records[1] << ',' << r.records[2] << '\n';
  return out.str();
}

nlohmann::json record_to_json(const EvalRecord& r) {
  return {{"user_id", r.user}, {"query_id", r.query}, {"ts", r.ts}, {"targets", r.targets},
          {"source", source_name(r.source)}};
}

EvalRecord record_from_json(const nlohmann::json& j) {
  EvalRecord r;
  r.user = j.at("user_id").get<UserId>();
  r.query = j.at("query_id").get<QueryId>();
  r.ts = j.at("ts").get<double>();
  r.targets = j.at("targets").get<std::vector<ItemId>>();
  r.source = parse_source(j.at("source").get<std::string>());
  if (r.targets.empty()) throw DataIntegrity("evaluation record with no target items");
  return r;
}

void write_eval_records(const std::filesystem::path& path, std::span<const EvalRecord> records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const EvalRecord& r : records) out << record_to_json(r).dump() << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<EvalRecord> read_eval_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<EvalRecord> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(record_from_json(nlohmann::json::parse(line)));
  return out;
}

}  // namespace moppr
