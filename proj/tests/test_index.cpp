#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "moppr/index.hpp"

using namespace moppr;
namespace fs = std::filesystem;

namespace {

Mat<float> random_unit_rows(std::mt19937_64& rng, int n, int dim) {
  std::normal_distribution<float> g(0.0f, 1.0f);
  Mat<float> m(n, dim);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < dim; ++c) m(r, c) = g(rng);
    m.row(r) /= m.row(r).norm();
  }
  return m;
}

std::vector<ItemId> iota_ids(int n, ItemId first = 0) {
  std::vector<ItemId> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), first);
  return ids;
}

// Independent full scan: score every row, sort by (score desc, id asc).
std::vector<ScoredItem> naive_scan(const std::vector<ItemId>& ids, const Mat<float>& v, std::span<const float> q,
                                   int k) {
  std::vector<ScoredItem> all;
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    double s = 0.0;
    for (Eigen::Index c = 0; c < v.cols(); ++c) s += static_cast<double>(q[c]) * v(r, c);
    all.push_back({ids[static_cast<std::size_t>(r)], s});
  }
  std::sort(all.begin(), all.end(), [](const ScoredItem& a, const ScoredItem& b) {
    return a.score != b.score ? a.score > b.score : a.id < b.id;
  });
  all.resize(static_cast<std::size_t>(k));
  return all;
}

std::vector<float> row_vec(const Mat<float>& m, Eigen::Index r) {
  return std::vector<float>(m.row(r).data(), m.row(r).data() + m.cols());
}

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "moppr_test_index";
  fs::create_directories(dir);
  return dir / name;
}

// Two tight blobs around +e0 and -e0.
Mat<float> two_blobs(std::mt19937_64& rng, int per_blob, int dim) {
  std::normal_distribution<float> g(0.0f, 0.05f);
  Mat<float> m(2 * per_blob, dim);
  for (int r = 0; r < 2 * per_blob; ++r) {
    for (int c = 0; c < dim; ++c) m(r, c) = g(rng);
    m(r, 0) += r < per_blob ? 3.0f : -3.0f;
  }
  return m;
}

void collect_rows(const ClusterTree& t, int node, std::vector<int>& out) {
  const auto& n = t.nodes[static_cast<std::size_t>(node)];
  if (n.leaf()) {
    out.insert(out.end(), n.rows.begin(), n.rows.end());
    return;
  }
  for (int c : n.children) collect_rows(t, c, out);
}

}  // namespace

TEST_CASE("int8 quantization: zero vector, extremal code, error bound") {
  const std::vector<float> zero(8, 0.0f);
  const QuantizedVector qz = quantize_int8(zero);
  CHECK(qz.scale == 1.0f);
  for (auto c : qz.codes) CHECK(c == 0);
  CHECK(dequantize(qz) == zero);

  const float s = 0.01f;
  const std::vector<float> ext{127 * s, 0.0f, -0.3f};
  const QuantizedVector qe = quantize_int8(ext);
  CHECK(qe.codes[0] == 127);
  CHECK(qe.codes[1] == 0);
  CHECK(qe.scale == doctest::Approx(s).epsilon(1e-6));

  std::mt19937_64 rng(3);
  double worst_ratio = 0.0;
  for (int trial = 0; trial < 10000; ++trial) {
    const Mat<float> v = random_unit_rows(rng, 1, 32);
    const std::vector<float> x = row_vec(v, 0);
    const QuantizedVector q = quantize_int8(x);
    const std::vector<float> back = dequantize(q);
    for (std::size_t k = 0; k < x.size(); ++k) {
      CHECK(std::abs(static_cast<int>(q.codes[k])) <= 127);
      worst_ratio = std::max(worst_ratio, std::fabs(static_cast<double>(x[k]) - back[k]) / q.scale);
    }
  }
  CHECK(worst_ratio <= 0.5 + 1e-6);

  CHECK_THROWS_AS(quantize_int8(std::vector<float>{1.0f, NAN}), InvalidInput);
  CHECK_THROWS_AS(quantize_int8(std::vector<float>{INFINITY}), InvalidInput);
}

TEST_CASE("quantized inner product stays within the stated bound") {
  std::mt19937_64 rng(4);
  const int dim = 32;
  for (int trial = 0; trial < 2000; ++trial) {
    const Mat<float> two = random_unit_rows(rng, 2, dim);
    const std::vector<float> a = row_vec(two, 0), b = row_vec(two, 1);
    const QuantizedVector qa = quantize_int8(a), qb = quantize_int8(b);
    const std::vector<float> da = dequantize(qa), db = dequantize(qb);
    double exact = 0, approx = 0;
    for (int k = 0; k < dim; ++k) {
      exact += static_cast<double>(a[k]) * b[k];
      approx += static_cast<double>(da[k]) * db[k];
    }
    const double bound = dim * (qa.scale / 2.0 + qb.scale / 2.0 + qa.scale * qb.scale / 4.0);
    CHECK(std::fabs(exact - approx) <= bound);
  }
}

TEST_CASE("cluster tree structure") {
  std::mt19937_64 rng(5);
  SUBCASE("small sets are one leaf") {
    const Mat<float> v = random_unit_rows(rng, 10, 4);
    const ClusterTree t = build_cluster_tree(v, 4, 10, 1);
    REQUIRE(t.nodes.size() == 1);
    CHECK(t.nodes[0].leaf());
    CHECK(t.nodes[0].rows.size() == 10);
    CHECK(t.depth == 0);
  }
  SUBCASE("two separated blobs split at the root") {
    const Mat<float> v = two_blobs(rng, 50, 6);
    const ClusterTree t = build_cluster_tree(v, 2, 20, 9);
    REQUIRE(t.nodes[0].children.size() == 2);
    for (int child : t.nodes[0].children) {
      std::vector<int> rows;
      collect_rows(t, child, rows);
      const bool first_blob = rows.front() < 50;
      for (int r : rows) CHECK((r < 50) == first_blob);
      CHECK(rows.size() == 50);
    }
  }
  SUBCASE("every row sits in exactly one leaf and leaves respect max_leaf") {
    const Mat<float> v = random_unit_rows(rng, 1000, 8);
    const ClusterTree t = build_cluster_tree(v, 5, 30, 2);
    std::vector<int> rows;
    collect_rows(t, 0, rows);
    std::sort(rows.begin(), rows.end());
    std::vector<int> all(1000);
    std::iota(all.begin(), all.end(), 0);
    CHECK(rows == all);
    for (const auto& n : t.nodes) {
      if (n.leaf()) CHECK(static_cast<int>(n.rows.size()) <= 30);
      if (!n.leaf()) CHECK(n.children.size() <= 5);
      for (float c : n.centroid) CHECK(std::isfinite(c));
    }
    CHECK(t.depth >= 2);
  }
  SUBCASE("coincident points still terminate") {
    const Mat<float> v = Mat<float>::Ones(100, 3);
    const ClusterTree t = build_cluster_tree(v, 3, 7, 1);
    std::vector<int> rows;
    collect_rows(t, 0, rows);
    CHECK(rows.size() == 100);
    for (const auto& n : t.nodes)
      if (n.leaf()) CHECK(static_cast<int>(n.rows.size()) <= 7);
  }
  SUBCASE("same seed rebuilds the same tree") {
    const Mat<float> v = random_unit_rows(rng, 500, 8);
    const ClusterTree a = build_cluster_tree(v, 4, 16, 11), b = build_cluster_tree(v, 4, 16, 11);
    REQUIRE(a.nodes.size() == b.nodes.size());
    for (std::size_t i = 0; i < a.nodes.size(); ++i) {
      CHECK(a.nodes[i].centroid == b.nodes[i].centroid);
      CHECK(a.nodes[i].children == b.nodes[i].children);
      CHECK(a.nodes[i].rows == b.nodes[i].rows);
    }
  }
  SUBCASE("bad arguments") {
    const Mat<float> v = random_unit_rows(rng, 5, 3);
    CHECK_THROWS_AS(build_cluster_tree(v, 1, 4, 1), InvalidConfig);
    CHECK_THROWS_AS(build_cluster_tree(v, 2, 0, 1), InvalidConfig);
    CHECK_THROWS_AS(build_cluster_tree(Mat<float>(0, 3), 2, 4, 1), InvalidInput);
  }
}

TEST_CASE("exact search") {
  std::mt19937_64 rng(6);
  SUBCASE("unit basis corpus") {
    const Mat<float> basis = Mat<float>::Identity(5, 5);
    const EmbeddingIndex idx = EmbeddingIndex::build(iota_ids(5, 100), basis, IndexConfig{});
    const std::vector<float> e1{1, 0, 0, 0, 0};
    const auto top = search_exact(idx, e1, 1);
    REQUIRE(top.size() == 1);
    CHECK(top[0].id == 100);
    CHECK(top[0].score == 1.0);
    // K = corpus: the rest tie at 0 and come back in id order.
    const auto all = search_exact(idx, e1, 5);
    REQUIRE(all.size() == 5);
    for (int k = 1; k < 5; ++k) CHECK(all[static_cast<std::size_t>(k)].id == 100 + k);
  }
  SUBCASE("equals a naive full scan on 1000 random vectors") {
    const Mat<float> v = random_unit_rows(rng, 1000, 16);
    const std::vector<ItemId> ids = iota_ids(1000, 7);
    IndexConfig cfg;
    cfg.build_tree = false;
    const EmbeddingIndex idx = EmbeddingIndex::build(ids, v, cfg);
    for (int q = 0; q < 20; ++q) {
      const std::vector<float> query = row_vec(random_unit_rows(rng, 1, 16), 0);
      for (int k : {1, 10, 100, 1000}) CHECK(search_exact(idx, query, k) == naive_scan(ids, v, query, k));
    }
  }
  SUBCASE("ties break by ascending id regardless of insertion order") {
    Mat<float> v(4, 2);
    v << 1, 0, 0, 1, 1, 0, 1, 0;
    const EmbeddingIndex idx = EmbeddingIndex::build({9, 3, 5, 1}, v, IndexConfig{});
    const auto top = search_exact(idx, std::vector<float>{1, 0}, 4);
    CHECK(top[0].id == 1);
    CHECK(top[1].id == 5);
    CHECK(top[2].id == 9);
    CHECK(top[3].id == 3);
  }
  SUBCASE("invalid arguments") {
    const EmbeddingIndex idx = EmbeddingIndex::build(iota_ids(3), random_unit_rows(rng, 3, 4), IndexConfig{});
    const std::vector<float> q(4, 0.5f);
    CHECK_THROWS_AS(search_exact(idx, q, 0), InvalidInput);
    CHECK_THROWS_AS(search_exact(idx, q, 4), InvalidInput);
    CHECK_THROWS_AS(search_exact(idx, std::vector<float>(3, 0.5f), 1), InvalidInput);
    CHECK_THROWS_AS(search_ann(idx, q, 1, 0), InvalidInput);
  }
}

TEST_CASE("approximate search") {
  std::mt19937_64 rng(7);
  SUBCASE("exhaustive beam equals exact search") {
    const Mat<float> v = random_unit_rows(rng, 2000, 16);
    IndexConfig cfg;
    cfg.branching = 8;
    cfg.max_leaf = 16;
    for (bool quantize : {false, true}) {
      cfg.quantize = quantize;
      const EmbeddingIndex idx = EmbeddingIndex::build(iota_ids(2000), v, cfg);
      for (int q = 0; q < 10; ++q) {
        const std::vector<float> query = row_vec(random_unit_rows(rng, 1, 16), 0);
        CHECK(search_ann(idx, query, 50, 2000) == search_exact(idx, query, 50));
      }
    }
  }
  SUBCASE("an indexed vector finds itself with a small beam on blob data") {
    // Unit rows, so each vector is its own unique inner-product maximizer.
    Mat<float> v = two_blobs(rng, 200, 8);
    v.rowwise().normalize();
    IndexConfig cfg;
    cfg.branching = 4;
    cfg.max_leaf = 10;
    const EmbeddingIndex idx = EmbeddingIndex::build(iota_ids(400), v, cfg);
    for (int r : {0, 57, 199, 200, 321, 399}) {
      const std::vector<float> q = row_vec(v, r);
      REQUIRE(search_exact(idx, q, 1)[0].id == r);
      const auto top = search_ann(idx, q, 1, 4);
      REQUIRE(top.size() == 1);
      CHECK(top[0].id == r);
    }
  }
  SUBCASE("requires a tree") {
    IndexConfig cfg;
    cfg.build_tree = false;
    const EmbeddingIndex idx = EmbeddingIndex::build(iota_ids(5), random_unit_rows(rng, 5, 4), cfg);
    CHECK_THROWS_AS(search_ann(idx, std::vector<float>(4, 0.1f), 1, 2), InvalidInput);
  }
}

TEST_CASE("GMV augmentation") {
  std::mt19937_64 rng(8);
  SUBCASE("augmented dot equals z + sigma ln price") {
    std::uniform_real_distribution<double> price(0.5, 5000.0), sig(0.01, 2.0);
    for (int t = 0; t < 1000; ++t) {
      const Mat<float> two = random_unit_rows(rng, 2, 12);
      const std::vector<float> uq = row_vec(two, 0), it = row_vec(two, 1);
      const double p = price(rng), s = sig(rng);
      const GmvAugmented g = gmv_augment(uq, s, it, p);
      double z = 0;
      for (int k = 0; k < 12; ++k) z += static_cast<double>(uq[k]) * it[k];
      CHECK(std::fabs(g.score - (z + s * std::log(p))) < 1e-6);
      CHECK(g.user_query.size() == 13);
      CHECK(g.item.back() == std::log(p));
      CHECK(g.user_query.back() == s);
    }
  }
  SUBCASE("equal relevance, higher price ranks first") {
    Mat<float> v(2, 2);
    v << 0.6f, 0.8f, 0.6f, 0.8f;
    IndexConfig cfg;
    cfg.gmv = true;
    const std::vector<double> prices{10.0, 100.0};
    const EmbeddingIndex idx = EmbeddingIndex::build({1, 2}, v, cfg, prices);
    const auto top = search_exact(idx, augment_query(std::vector<float>{1.0f, 0.0f}, 0.1), 2);
    CHECK(top[0].id == 2);
    CHECK(top[1].id == 1);
  }
  SUBCASE("corpus ordering equals ordering by exp(z / sigma) * price") {
    const int n = 1000;
    const Mat<float> v = random_unit_rows(rng, n, 16);
    std::lognormal_distribution<double> price(3.0, 1.0);
    std::vector<double> prices(n);
    for (auto& p : prices) p = price(rng);
    for (double sigma : {0.05, 0.1, 0.5}) {
      IndexConfig cfg;
      cfg.gmv = true;
      cfg.sigma = sigma;
      const EmbeddingIndex idx = EmbeddingIndex::build(iota_ids(n), v, cfg, prices);
      const std::vector<float> uq = row_vec(random_unit_rows(rng, 1, 16), 0);
      const auto got = search_exact(idx, augment_query(uq, sigma), n);
      std::vector<std::pair<double, ItemId>> gmv;
      for (int r = 0; r < n; ++r) {
        double z = 0;
        for (int k = 0; k < 16; ++k) z += static_cast<double>(uq[k]) * v(r, k);
        gmv.emplace_back(std::exp(z / sigma) * prices[static_cast<std::size_t>(r)], r);
      }
      std::sort(gmv.begin(), gmv.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
      int mismatches = 0;
      for (int r = 0; r < n; ++r) mismatches += got[static_cast<std::size_t>(r)].id != gmv[static_cast<std::size_t>(r)].second;
      CHECK(mismatches == 0);
    }
  }
  SUBCASE("rejects nonpositive sigma and price") {
    const std::vector<float> a{1.0f}, b{1.0f};
    CHECK_THROWS_AS(gmv_augment(a, 0.0, b, 1.0), InvalidInput);
    CHECK_THROWS_AS(gmv_augment(a, 0.1, b, 0.0), InvalidInput);
    CHECK_THROWS_AS(gmv_augment(a, 0.1, b, -2.0), InvalidInput);
    IndexConfig cfg;
    cfg.gmv = true;
    cfg.sigma = -1.0;
    CHECK_THROWS_AS(EmbeddingIndex::build({0}, Mat<float>::Ones(1, 1), cfg, std::vector<double>{1.0}),
                    InvalidConfig);
    cfg.sigma = 0.1;
    CHECK_THROWS_AS(EmbeddingIndex::build({0}, Mat<float>::Ones(1, 1), cfg, std::vector<double>{0.0}), InvalidInput);
    CHECK_THROWS_AS(EmbeddingIndex::build({0}, Mat<float>::Ones(1, 1), cfg), InvalidInput);
  }
}

TEST_CASE("index file round trip in every mode") {
  std::mt19937_64 rng(9);
  const Mat<float> v = random_unit_rows(rng, 300, 8);
  std::vector<double> prices(300);
  for (std::size_t i = 0; i < prices.size(); ++i) prices[i] = 1.0 + static_cast<double>(i);
  for (bool quantize : {false, true})
    for (bool gmv : {false, true})
      for (bool tree : {false, true}) {
        IndexConfig cfg;
        cfg.quantize = quantize;
        cfg.gmv = gmv;
        cfg.build_tree = tree;
        cfg.max_leaf = 20;
        const EmbeddingIndex idx = EmbeddingIndex::build(iota_ids(300, 1000), v, cfg, gmv ? prices : std::vector<double>{});
        const fs::path path = temp_path("rt.idx");
        idx.save(path);
        const EmbeddingIndex back = EmbeddingIndex::load(path);
        CHECK(back == idx);
        CHECK(back.dim() == (gmv ? 9 : 8));
        std::vector<float> q = row_vec(random_unit_rows(rng, 1, 8), 0);
        if (gmv) q = augment_query(q, 0.1);
        CHECK(search_exact(back, q, 10) == search_exact(idx, q, 10));
        if (quantize) {
          for (std::size_t r = 0; r < 300; r += 37) {
            const auto s = idx.stored_vector(r);
            for (int d = 0; d < 8; ++d)
              CHECK(std::fabs(s[static_cast<std::size_t>(d)] - v(static_cast<Eigen::Index>(r), d)) <= 1.0f / 127 / 2 + 1e-6f);
          }
        }
      }
}

TEST_CASE("index header follows the documented byte layout") {
  std::mt19937_64 rng(10);
  IndexConfig cfg;
  cfg.quantize = true;
  cfg.gmv = true;
  cfg.build_tree = false;
  const Mat<float> v = random_unit_rows(rng, 3, 4);
  const EmbeddingIndex idx = EmbeddingIndex::build({5, 6, 7}, v, cfg, std::vector<double>{2.0, 3.0, 4.0});
  const fs::path path = temp_path("layout.idx");
  idx.save(path);
  std::ifstream in(path, std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), {});
  // magic 8 + version 4 + dim 4 + count 8 + 4 flag bytes + 3 ids * 8 + 3 scales * 4 + 12 codes + 3 log prices * 8
  REQUIRE(bytes.size() == 8 + 4 + 4 + 8 + 4 + 24 + 12 + 12 + 24);
  CHECK(std::string(bytes.data(), 8) == "MOPPRIDX");
  auto u32 = [&](std::size_t off) {
    std::uint32_t x;
    std::memcpy(&x, bytes.data() + off, 4);
    return x;
  };
  CHECK(u32(8) == 1);
  CHECK(u32(12) == 4);
  std::uint64_t count;
  std::memcpy(&count, bytes.data() + 16, 8);
  CHECK(count == 3);
  CHECK(bytes[24] == 1);  // gmv mode
  CHECK(bytes[25] == 1);  // quantized
  CHECK(bytes[26] == 0);  // no tree
  std::int64_t id1;
  std::memcpy(&id1, bytes.data() + 28 + 8, 8);
  CHECK(id1 == 6);
  double lp0;
  std::memcpy(&lp0, bytes.data() + 28 + 24 + 12 + 12, 8);
  CHECK(lp0 == std::log(2.0));
}

TEST_CASE("damaged index files are reported") {
  std::mt19937_64 rng(11);
  const EmbeddingIndex idx = EmbeddingIndex::build(iota_ids(50), random_unit_rows(rng, 50, 4), IndexConfig{});
  const fs::path path = temp_path("bad.idx");
  idx.save(path);
  const auto full = fs::file_size(path);
  fs::resize_file(path, full - 7);
  CHECK_THROWS_AS(EmbeddingIndex::load(path), IoError);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "NOTANIDX0000";
  }
  CHECK_THROWS_AS(EmbeddingIndex::load(path), IoError);
  CHECK_THROWS_AS(EmbeddingIndex::load(temp_path("missing.idx")), IoError);
}

TEST_CASE("index build is deterministic") {
  std::mt19937_64 rng(12);
  const Mat<float> v = random_unit_rows(rng, 800, 8);
  IndexConfig cfg;
  cfg.max_leaf = 25;
  CHECK(EmbeddingIndex::build(iota_ids(800), v, cfg) == EmbeddingIndex::build(iota_ids(800), v, cfg));
  const fs::path a = temp_path("det_a.idx"), b = temp_path("det_b.idx");
  EmbeddingIndex::build(iota_ids(800), v, cfg).save(a);
  EmbeddingIndex::build(iota_ids(800), v, cfg).save(b);
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
  CHECK(sa == sb);
}
