#include "moppr/index.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "binary_io.hpp"
#include "moppr/rng.hpp"

namespace moppr {

namespace {

constexpr char kIndexMagic[9] = "MOPPRIDX";
constexpr std::uint32_t kIndexVersion = 1;
constexpr int kKmeansIterations = 25;

double dot_f(const float* a, const float* b, int n) {
  double s = 0.0;
  for (int k = 0; k < n; ++k) s += static_cast<double>(a[k]) * b[k];
  return s;
}

bool better(const ScoredItem& a, const ScoredItem& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.id < b.id;
}

std::vector<ScoredItem> top_k(std::vector<ScoredItem> all, int k) {
  const auto kk = std::min<std::size_t>(static_cast<std::size_t>(k), all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(kk), all.end(), better);
  all.resize(kk);
  return all;
}

void check_query(const EmbeddingIndex& index, std::span<const float> query, int k) {
  if (static_cast<int>(query.size()) != index.dim())
    throw InvalidInput("query has dimension " + std::to_string(query.size()) + ", index expects " +
                       std::to_string(index.dim()));
  if (k < 1 || static_cast<std::size_t>(k) > index.size())
    throw InvalidInput("K must be in [1, " + std::to_string(index.size()) + "], got " + std::to_string(k));
}

double sq_dist(const float* a, const std::vector<double>& c) {
  double s = 0.0;
  for (std::size_t k = 0; k < c.size(); ++k) {
    const double d = a[k] - c[k];
    s += d * d;
  }
  return s;
}

/// One k-means split of `rows` into at most k groups; never returns a
/// single group for more than one distinct point.
std::vector<std::vector<int>> kmeans_split(const Mat<float>& x, const std::vector<int>& rows, int k, Rng& rng) {
  const int dim = static_cast<int>(x.cols());
  const std::size_t n = rows.size();
  k = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(k), n));
  std::vector<std::vector<double>> centers;
  centers.reserve(static_cast<std::size_t>(k));
  auto row_ptr = [&](int r) { return x.data() + static_cast<std::ptrdiff_t>(r) * dim; };
  auto as_center = [&](int r) {
    std::vector<double> c(static_cast<std::size_t>(dim));
    for (int d = 0; d < dim; ++d) c[static_cast<std::size_t>(d)] = row_ptr(r)[d];
    return c;
  };

  // Farthest-point seeding from a random start.
  centers.push_back(as_center(rows[static_cast<std::size_t>(uniform_index(rng, static_cast<std::int64_t>(n)))]));
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  while (static_cast<int>(centers.size()) < k) {
    std::size_t far = 0;
    double far_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], sq_dist(row_ptr(rows[i]), centers.back()));
      if (nearest[i] > far_d) {
        far_d = nearest[i];
        far = i;
      }
    }
    if (far_d <= 0.0) break;  // every remaining point coincides with a center
    centers.push_back(as_center(rows[far]));
  }
  k = static_cast<int>(centers.size());

  std::vector<int> assign(n, 0);
  for (int it = 0; it < kKmeansIterations; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = sq_dist(row_ptr(rows[i]), centers[static_cast<std::size_t>(c)]);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      changed = changed || assign[i] != best;
      assign[i] = best;
    }
    std::vector<std::vector<double>> sums(static_cast<std::size_t>(k), std::vector<double>(static_cast<std::size_t>(dim), 0.0));
    std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(assign[i]);
      ++counts[c];
      for (int d = 0; d < dim; ++d) sums[c][static_cast<std::size_t>(d)] += row_ptr(rows[i])[d];
    }
    for (std::size_t c = 0; c < static_cast<std::size_t>(k); ++c) {
      if (counts[c] == 0) continue;  // keep the previous center
      for (auto& v : sums[c]) v /= static_cast<double>(counts[c]);
      centers[c] = std::move(sums[c]);
    }
    if (it > 0 && !changed) break;
  }

  std::vector<std::vector<int>> groups(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < n; ++i) groups[static_cast<std::size_t>(assign[i])].push_back(rows[i]);
  std::erase_if(groups, [](const std::vector<int>& g) { return g.empty(); });
  return groups;
}

std::vector<float> centroid_of(const Mat<float>& x, const std::vector<int>& rows) {
  std::vector<double> acc(static_cast<std::size_t>(x.cols()), 0.0);
  for (int r : rows)
    for (Eigen::Index d = 0; d < x.cols(); ++d) acc[static_cast<std::size_t>(d)] += x(r, d);
  std::vector<float> c(acc.size());
  for (std::size_t d = 0; d < acc.size(); ++d) c[d] = static_cast<float>(acc[d] / static_cast<double>(rows.size()));
  return c;
}

int build_node(ClusterTree& tree, const Mat<float>& x, std::vector<int> rows, int depth, Rng& rng) {
  const int id = static_cast<int>(tree.nodes.size());
  tree.nodes.emplace_back();
  tree.nodes[static_cast<std::size_t>(id)].centroid = centroid_of(x, rows);
  tree.depth = std::max(tree.depth, depth);
  if (static_cast<int>(rows.size()) <= tree.max_leaf) {
    tree.nodes[static_cast<std::size_t>(id)].rows = std::move(rows);
    return id;
  }
  std::vector<std::vector<int>> groups = kmeans_split(x, rows, tree.branching, rng);
  if (groups.size() < 2) {
    // Coincident points: split by position so the recursion terminates.
    groups.assign(static_cast<std::size_t>(tree.branching), {});
    for (std::size_t i = 0; i < rows.size(); ++i) groups[i * groups.size() / rows.size()].push_back(rows[i]);
    std::erase_if(groups, [](const std::vector<int>& g) { return g.empty(); });
  }
  std::vector<int> children;
  for (auto& g : groups) children.push_back(build_node(tree, x, std::move(g), depth + 1, rng));
  tree.nodes[static_cast<std::size_t>(id)].children = std::move(children);
  return id;
}

}  // namespace

QuantizedVector quantize_int8(std::span<const float> v) {
  float maxabs = 0.0f;
  for (float x : v) {
    if (!std::isfinite(x)) throw InvalidInput("cannot quantize a non-finite value");
    maxabs = std::max(maxabs, std::fabs(x));
  }
  QuantizedVector q;
  q.scale = maxabs > 0.0f ? maxabs / 127.0f : 1.0f;
  q.codes.resize(v.size());
  for (std::size_t k = 0; k < v.size(); ++k) {
    const float c = std::nearbyint(v[k] / q.scale);
    q.codes[k] = static_cast<std::int8_t>(std::clamp(c, -127.0f, 127.0f));
  }
  return q;
}

std::vector<float> dequantize(const QuantizedVector& q) {
  std::vector<float> v(q.codes.size());
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = static_cast<float>(q.codes[k]) * q.scale;
  return v;
}

ClusterTree build_cluster_tree(const Mat<float>& vectors, int branching, int max_leaf, std::uint64_t seed) {
  if (branching < 2) throw InvalidConfig("cluster tree branching must be >= 2");
  if (max_leaf < 1) throw InvalidConfig("cluster tree max_leaf must be >= 1");
  if (vectors.rows() < 1) throw InvalidInput("cluster tree needs at least one vector");
  if (!vectors.allFinite()) throw InvalidInput("cluster tree input contains non-finite values");
  ClusterTree tree;
  tree.branching = branching;
  tree.max_leaf = max_leaf;
  std::vector<int> rows(static_cast<std::size_t>(vectors.rows()));
  std::iota(rows.begin(), rows.end(), 0);
  Rng rng = make_rng(seed, {0x74726565ULL});
  build_node(tree, vectors, std::move(rows), 0, rng);
  return tree;
}

void IndexConfig::validate() const {
  if (!(sigma > 0.0)) throw InvalidConfig("index config: sigma must be > 0");
  if (branching < 2) throw InvalidConfig("index config: branching must be >= 2");
  if (max_leaf < 1) throw InvalidConfig("index config: max_leaf must be >= 1");
  if (beam < 1) throw InvalidConfig("index config: beam must be >= 1");
}

EmbeddingIndex EmbeddingIndex::build(std::vector<ItemId> ids, const Mat<float>& vectors, const IndexConfig& config,
                                     std::span<const double> prices) {
  config.validate();
  if (static_cast<Eigen::Index>(ids.size()) != vectors.rows())
    throw InvalidInput("index build: id count differs from vector count");
  if (ids.empty()) throw InvalidInput("index build: empty corpus");
  if (!vectors.allFinite()) throw InvalidInput("index build: non-finite vector");
  EmbeddingIndex index;
  index.ids_ = std::move(ids);
  index.base_dim_ = static_cast<int>(vectors.cols());
  index.mode_ = config.gmv ? IndexMode::GmvAugmented : IndexMode::Plain;
  index.quantized_ = config.quantize;
  const std::size_t n = index.ids_.size();
  const auto dim = static_cast<std::size_t>(index.base_dim_);
  if (config.quantize) {
    index.codes_.resize(n * dim);
    index.scales_.resize(n);
    for (std::size_t r = 0; r < n; ++r) {
      const QuantizedVector q =
          quantize_int8(std::span<const float>(vectors.data() + r * dim, dim));
      std::copy(q.codes.begin(), q.codes.end(), index.codes_.begin() + static_cast<std::ptrdiff_t>(r * dim));
      index.scales_[r] = q.scale;
    }
  } else {
    index.raw_.assign(vectors.data(), vectors.data() + n * dim);
  }
  if (config.gmv) {
    if (prices.size() != n) throw InvalidInput("index build: GMV mode needs one price per item");
    index.log_price_.resize(n);
    for (std::size_t r = 0; r < n; ++r) {
      if (!(prices[r] > 0.0)) throw InvalidInput("index build: prices must be > 0");
      index.log_price_[r] = std::log(prices[r]);
    }
  }
  if (config.build_tree) {
    Mat<float> stored(static_cast<Eigen::Index>(n), index.dim());
    for (std::size_t r = 0; r < n; ++r) {
      const std::vector<float> v = index.stored_vector(r);
      for (int d = 0; d < index.dim(); ++d) stored(static_cast<Eigen::Index>(r), d) = v[static_cast<std::size_t>(d)];
    }
    index.tree_ = build_cluster_tree(stored, config.branching, config.max_leaf, config.seed);
  }
  return index;
}

std::vector<float> EmbeddingIndex::stored_vector(std::size_t r) const {
  const auto dim = static_cast<std::size_t>(base_dim_);
  std::vector<float> v(static_cast<std::size_t>(this->dim()));
  if (quantized_) {
    for (std::size_t k = 0; k < dim; ++k) v[k] = static_cast<float>(codes_[r * dim + k]) * scales_[r];
  } else {
    std::copy(raw_.begin() + static_cast<std::ptrdiff_t>(r * dim),
              raw_.begin() + static_cast<std::ptrdiff_t>((r + 1) * dim), v.begin());
  }
  if (mode_ == IndexMode::GmvAugmented) v[dim] = static_cast<float>(log_price_[r]);
  return v;
}

double EmbeddingIndex::score_row(std::size_t r, std::span<const float> q) const {
  const auto dim = static_cast<std::size_t>(base_dim_);
  double s = 0.0;
  if (quantized_) {
    const std::int8_t* c = codes_.data() + r * dim;
    const float scale = scales_[r];
    for (std::size_t k = 0; k < dim; ++k) s += static_cast<double>(q[k]) * (static_cast<float>(c[k]) * scale);
  } else {
    s = dot_f(q.data(), raw_.data() + r * dim, base_dim_);
  }
  if (mode_ == IndexMode::GmvAugmented) s += static_cast<double>(q[dim]) * log_price_[r];
  return s;
}

std::vector<ScoredItem> search_exact(const EmbeddingIndex& index, std::span<const float> query, int k) {
  check_query(index, query, k);
  std::vector<ScoredItem> all(index.size());
  for (std::size_t r = 0; r < index.size(); ++r) all[r] = {index.ids()[r], index.score_row(r, query)};
  return top_k(std::move(all), k);
}

std::vector<ScoredItem> search_ann(const EmbeddingIndex& index, std::span<const float> query, int k, int beam) {
  check_query(index, query, k);
  if (beam < 1) throw InvalidInput("beam must be >= 1");
  if (!index.tree()) throw InvalidInput("index has no cluster tree");
  const ClusterTree& tree = *index.tree();
  std::vector<int> reached;
  std::vector<int> frontier{0};
  if (tree.nodes[0].leaf()) {
    reached.push_back(0);
    frontier.clear();
  }
  while (!frontier.empty()) {
    std::vector<std::pair<double, int>> children;
    for (int node : frontier)
      for (int c : tree.nodes[static_cast<std::size_t>(node)].children)
        children.emplace_back(dot_f(query.data(), tree.nodes[static_cast<std::size_t>(c)].centroid.data(), index.dim()), c);
    const auto keep = std::min<std::size_t>(static_cast<std::size_t>(beam), children.size());
    std::partial_sort(children.begin(), children.begin() + static_cast<std::ptrdiff_t>(keep), children.end(),
                      [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
    frontier.clear();
    for (std::size_t i = 0; i < keep; ++i) {
      const int c = children[i].second;
      if (tree.nodes[static_cast<std::size_t>(c)].leaf())
        reached.push_back(c);
      else
        frontier.push_back(c);
    }
  }
  std::vector<ScoredItem> scored;
  for (int leaf : reached)
    for (int r : tree.nodes[static_cast<std::size_t>(leaf)].rows)
      scored.push_back({index.ids()[static_cast<std::size_t>(r)], index.score_row(static_cast<std::size_t>(r), query)});
  return top_k(std::move(scored), k);
}

std::vector<float> augment_query(std::span<const float> user_query, double sigma) {
  if (!(sigma > 0.0)) throw InvalidInput("sigma must be > 0");
  std::vector<float> out(user_query.begin(), user_query.end());
  out.push_back(static_cast<float>(sigma));
  return out;
}

GmvAugmented gmv_augment(std::span<const float> user_query, double sigma, std::span<const float> item, double price) {
  if (!(price > 0.0)) throw InvalidInput("price must be > 0");
  if (user_query.size() != item.size()) throw InvalidInput("gmv_augment: embedding dimensions differ");
  GmvAugmented g;
  if (!(sigma > 0.0)) throw InvalidInput("sigma must be > 0");
  g.user_query.assign(user_query.begin(), user_query.end());
  g.user_query.push_back(sigma);
  g.item.assign(item.begin(), item.end());
  g.item.push_back(std::log(price));
  for (std::size_t k = 0; k < g.item.size(); ++k) g.score += g.user_query[k] * g.item[k];
  return g;
}

void EmbeddingIndex::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write index file " + path.string());
  out.write(kIndexMagic, 8);
  bin::put<std::uint32_t>(out, kIndexVersion);
  bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(base_dim_));
  bin::put<std::uint64_t>(out, ids_.size());
  bin::put<std::uint8_t>(out, static_cast<std::uint8_t>(mode_));
  bin::put<std::uint8_t>(out, quantized_ ? 1 : 0);
  bin::put<std::uint8_t>(out, tree_ ? 1 : 0);
  bin::put<std::uint8_t>(out, 0);
  for (ItemId id : ids_) bin::put<std::int64_t>(out, id);
  if (quantized_) {
    bin::put_array(out, scales_.data(), scales_.size());
    bin::put_array(out, codes_.data(), codes_.size());
  } else {
    bin::put_array(out, raw_.data(), raw_.size());
  }
  if (mode_ == IndexMode::GmvAugmented) bin::put_array(out, log_price_.data(), log_price_.size());
  if (tree_) {
    bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(tree_->branching));
    bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(tree_->max_leaf));
    bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(tree_->depth));
    bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(tree_->nodes.size()));
    for (const auto& node : tree_->nodes) {
      bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(node.children.size()));
      bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(node.rows.size()));
      bin::put_array(out, node.centroid.data(), node.centroid.size());
      bin::put_array(out, node.children.data(), node.children.size());
      bin::put_array(out, node.rows.data(), node.rows.size());
    }
  }
  if (!out) throw IoError("write failed: " + path.string());
}

EmbeddingIndex EmbeddingIndex::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open index file " + path.string());
  bin::expect_magic(in, kIndexMagic, "index file " + path.string());
  const auto version = bin::get<std::uint32_t>(in, "version");
  if (version != kIndexVersion) throw IoError("unsupported index version " + std::to_string(version));
  EmbeddingIndex index;
  index.base_dim_ = static_cast<int>(bin::get<std::uint32_t>(in, "dim"));
  const auto n = static_cast<std::size_t>(bin::get<std::uint64_t>(in, "count"));
  const auto mode = bin::get<std::uint8_t>(in, "mode");
  if (mode > 1) throw IoError("unknown index mode " + std::to_string(mode));
  index.mode_ = static_cast<IndexMode>(mode);
  index.quantized_ = bin::get<std::uint8_t>(in, "quantized flag") != 0;
  const bool has_tree = bin::get<std::uint8_t>(in, "tree flag") != 0;
  bin::get<std::uint8_t>(in, "padding");
  const auto dim = static_cast<std::size_t>(index.base_dim_);
  index.ids_.resize(n);
  for (auto& id : index.ids_) id = static_cast<ItemId>(bin::get<std::int64_t>(in, "id table"));
  if (index.quantized_) {
    index.scales_.resize(n);
    index.codes_.resize(n * dim);
    bin::get_array(in, index.scales_.data(), n, "scales");
    bin::get_array(in, index.codes_.data(), n * dim, "codes");
  } else {
    index.raw_.resize(n * dim);
    bin::get_array(in, index.raw_.data(), n * dim, "vectors");
  }
  if (index.mode_ == IndexMode::GmvAugmented) {
    index.log_price_.resize(n);
    bin::get_array(in, index.log_price_.data(), n, "log prices");
  }
  if (has_tree) {
    ClusterTree tree;
    tree.branching = static_cast<int>(bin::get<std::uint32_t>(in, "branching"));
    tree.max_leaf = static_cast<int>(bin::get<std::uint32_t>(in, "max_leaf"));
    tree.depth = static_cast<int>(bin::get<std::uint32_t>(in, "depth"));
    const auto nodes = bin::get<std::uint32_t>(in, "node count");
    tree.nodes.resize(nodes);
    for (auto& node : tree.nodes) {
      const auto nc = bin::get<std::uint32_t>(in, "node children");
      const auto nr = bin::get<std::uint32_t>(in, "node rows");
      node.centroid.resize(static_cast<std::size_t>(index.dim()));
      node.children.resize(nc);
      node.rows.resize(nr);
      bin::get_array(in, node.centroid.data(), node.centroid.size(), "centroid");
      bin::get_array(in, node.children.data(), nc, "children");
      bin::get_array(in, node.rows.data(), nr, "leaf rows");
      for (int c : node.children)
        if (c <= 0 || static_cast<std::uint32_t>(c) >= nodes) throw IoError("index file: bad child node reference");
      for (int r : node.rows)
        if (r < 0 || static_cast<std::size_t>(r) >= n) throw IoError("index file: bad leaf row reference");
    }
    index.tree_ = std::move(tree);
  }
  return index;
}

bool EmbeddingIndex::operator==(const EmbeddingIndex& o) const {
  auto same_tree = [](const std::optional<ClusterTree>& a, const std::optional<ClusterTree>& b) {
    if (a.has_value() != b.has_value()) return false;
    if (!a) return true;
    if (a->branching != b->branching || a->max_leaf != b->max_leaf || a->depth != b->depth ||
        a->nodes.size() != b->nodes.size())
      return false;
    for (std::size_t i = 0; i < a->nodes.size(); ++i) {
      const auto& x = a->nodes[i];
      const auto& y = b->nodes[i];
      if (x.centroid != y.centroid || x.children != y.children || x.rows != y.rows) return false;
    }
    return true;
  };
  return ids_ == o.ids_ && base_dim_ == o.base_dim_ && mode_ == o.mode_ && quantized_ == o.quantized_ &&
         raw_ == o.raw_ && codes_ == o.codes_ && scales_ == o.scales_ && log_price_ == o.log_price_ &&
         same_tree(tree_, o.tree_);
}

}  // namespace moppr
