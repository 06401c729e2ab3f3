#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "moppr/common.hpp"
#include "moppr/model.hpp"

namespace moppr {

struct QuantizedVector {
  std::vector<std::int8_t> codes;
  float scale = 1.0f;
};

/// Symmetric per-vector INT8: scale = max|v|/127 (1 for the zero vector),
/// code = round(v/scale). Throws InvalidInput on non-finite input.
QuantizedVector quantize_int8(std::span<const float> v);
std::vector<float> dequantize(const QuantizedVector& q);

/// k-means tree over row indices of a vector set. Node 0 is the root.
struct ClusterTree {
  struct Node {
    std::vector<float> centroid;
    /// Child node indices; empty for a leaf.
    std::vector<int> children;
    /// Row indices held by a leaf.
    std::vector<int> rows;
    bool leaf() const { return children.empty(); }
  };
  std::vector<Node> nodes;
  int branching = 2;
  int max_leaf = 1;
  int depth = 0;
};

/// Recursive k-means (k = branching, 25 Lloyd iterations, farthest-point
/// seeding) until every leaf holds at most max_leaf rows.
ClusterTree build_cluster_tree(const Mat<float>& vectors, int branching, int max_leaf, std::uint64_t seed);

enum class IndexMode : std::uint8_t { Plain = 0, GmvAugmented = 1 };

struct IndexConfig {
  bool quantize = false;
  bool gmv = false;
  /// Inner-product scale of the GMV mode.
  double sigma = 0.1;
  bool build_tree = true;
  int branching = 16;
  int max_leaf = 64;
  int beam = 16;
  std::uint64_t seed = 7;

  void validate() const;
};

struct ScoredItem {
  ItemId id = 0;
  double score = 0.0;
  bool operator==(const ScoredItem&) const = default;
};

/// Serving-side item store. In GmvAugmented mode every item carries one
/// extra coordinate, ln(price), kept in float64 even when the rest of the
/// vector is quantized.
class EmbeddingIndex {
 public:
  /// `prices` is required (and only used) in GmvAugmented mode.
  static EmbeddingIndex build(std::vector<ItemId> ids, const Mat<float>& vectors, const IndexConfig& config,
                              std::span<const double> prices = {});

  std::size_t size() const { return ids_.size(); }
  /// Dimension a query must have (base dim + 1 in GMV mode).
  int dim() const { return base_dim_ + (mode_ == IndexMode::GmvAugmented ? 1 : 0); }
  int base_dim() const { return base_dim_; }
  IndexMode mode() const { return mode_; }
  bool quantized() const { return quantized_; }
  const std::vector<ItemId>& ids() const { return ids_; }
  const std::optional<ClusterTree>& tree() const { return tree_; }

  /// The vector actually scored for row r (dequantized, augmented in GMV mode).
  std::vector<float> stored_vector(std::size_t r) const;
  double score_row(std::size_t r, std::span<const float> query) const;

  void save(const std::filesystem::path& path) const;
  static EmbeddingIndex load(const std::filesystem::path& path);

  bool operator==(const EmbeddingIndex& other) const;

 private:
  std::vector<ItemId> ids_;
  int base_dim_ = 0;
  IndexMode mode_ = IndexMode::Plain;
  bool quantized_ = false;
  std::vector<float> raw_;
  std::vector<std::int8_t> codes_;
  std::vector<float> scales_;
  std::vector<double> log_price_;
  std::optional<ClusterTree> tree_;
};

/// Top-K by inner product, descending; ties by ascending item id.
std::vector<ScoredItem> search_exact(const EmbeddingIndex& index, std::span<const float> query, int k);

/// Beam search down the tree keeping the `beam` best nodes per level by
/// centroid score; every row of every reached leaf is scored exactly.
std::vector<ScoredItem> search_ann(const EmbeddingIndex& index, std::span<const float> query, int k, int beam);

struct GmvAugmented {
  std::vector<double> user_query;
  std::vector<double> item;
  double score = 0.0;
};

/// uq' = (uq, sigma), it' = (it, ln price); score = dot(uq', it').
GmvAugmented gmv_augment(std::span<const float> user_query, double sigma, std::span<const float> item, double price);

/// (uq, sigma); throws InvalidInput unless sigma > 0.
std::vector<float> augment_query(std::span<const float> user_query, double sigma);

}  // namespace moppr
