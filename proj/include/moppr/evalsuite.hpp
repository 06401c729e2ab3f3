#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "moppr/checkpoint.hpp"
#include "moppr/world.hpp"

namespace moppr {

enum class RecordSource : std::uint8_t { SearchClick = 0, SearchPurchase = 1, OffsitePurchase = 2 };
inline constexpr int kNumSources = 3;
const char* source_name(RecordSource s);
RecordSource parse_source(const std::string& name);

struct EvalRecord {
  UserId user = 0;
  QueryId query = 0;
  double ts = 0.0;
  /// Clicked and/or purchased items; nonempty.
  std::vector<ItemId> targets;
  RecordSource source = RecordSource::SearchClick;

  bool purchase() const { return source != RecordSource::SearchClick; }
};

struct EvalConfig {
  /// 0 picks max(50, 5% of the catalog).
  int k = 0;
  /// Held-out page views simulated for the search-log sources.
  int heldout_pages = 4000;
  int click_records = 2000;
  int purchase_records = 1000;
  int offsite_records = 1000;

  void validate() const;
};

struct MetricsReport {
  double recall = 0.0;
  double ndcg = 0.0;
  double recall_p = 0.0;
  double ndcg_p = 0.0;
  double p_good = 0.0;
  int k = 0;
  std::array<long, kNumSources> records{};

  bool operator==(const MetricsReport&) const = default;
};

int resolve_k(int k, std::size_t catalog_size);

/// |I ∩ T| / |T|. Throws InvalidInput on empty targets.
double recall_at_k(std::span<const ItemId> retrieved, std::span<const ItemId> targets);
/// Hits discounted by 1/log2(rank+1), divided by the same discount summed
/// over all K ranks.
double ndcg_at_k(std::span<const ItemId> retrieved, std::span<const ItemId> targets);
/// Fraction of retrieved items judged good.
double p_good(std::span<const std::uint8_t> good);
double p_good(const World& world, QueryId query, std::span<const ItemId> retrieved);

/// Records from held-out search pages (clicks, purchases) and simulated
/// purchases made outside search. Deterministic in (world seed, config).
std::vector<EvalRecord> build_eval_records(const World& world, std::span<const PageView> heldout,
                                           const EvalConfig& config);

/// Scores every catalog item against each record embedding, keeps the exact
/// top K and aggregates. `record_embs` has one row per record; `item_embs`
/// one row per catalog item in id order.
MetricsReport evaluate_embeddings(const Mat<float>& record_embs, const Mat<float>& item_embs,
                                  std::span<const EvalRecord> records, const World& world, int k);

/// Item-tower embeddings of the whole catalog, id order.
Mat<float> embed_catalog(const Checkpoint& ckpt, const World& world);
/// User-query embeddings of (user, query, ts) triples.
Mat<float> embed_records(const Checkpoint& ckpt, const World& world, std::span<const EvalRecord> records);

MetricsReport evaluate(const Checkpoint& ckpt, std::span<const EvalRecord> records, const World& world, int k);

nlohmann::json report_to_json(const MetricsReport& r);
std::string report_csv(const MetricsReport& r);

nlohmann::json record_to_json(const EvalRecord& r);
EvalRecord record_from_json(const nlohmann::json& j);
void write_eval_records(const std::filesystem::path& path, std::span<const EvalRecord> records);
std::vector<EvalRecord> read_eval_records(const std::filesystem::path& path);

}  // namespace moppr
