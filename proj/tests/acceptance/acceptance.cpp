// Acceptance run: one PASS/FAIL line per criterion. A failed criterion sets
// the exit status only under --strict.
// Criteria 7-9 share one set of trained models per seed.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "moppr/checkpoint.hpp"
#include "moppr/evalsuite.hpp"
#include "moppr/index.hpp"
#include "moppr/objective.hpp"
#include "moppr/pipeline.hpp"
#include "moppr/world_io.hpp"

using namespace moppr;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
  void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s << std::setprecision(prec) << v;
  return s.str();
}

int failures = 0;

void run(int id, const std::string& name, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail = std::string("exception: ") + e.what();
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << name << " (" << o.detail << "; "
            << fmt(secs, 3) << " s)" << std::endl;
}

Mat<float> random_rows(std::mt19937_64& rng, int n, int d, bool unit) {
  std::normal_distribution<float> g(0.0f, 1.0f);
  Mat<float> m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  if (unit) m.rowwise().normalize();
  return m;
}

std::vector<float> row_of(const Mat<float>& m, Eigen::Index r) {
  return std::vector<float>(m.row(r).data(), m.row(r).data() + m.cols());
}

std::vector<ItemId> iota_ids(int n) {
  std::vector<ItemId> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), ItemId{0});
  return ids;
}

std::vector<ItemId> ids_of(const std::vector<ScoredItem>& v) {
  std::vector<ItemId> out;
  for (const ScoredItem& s : v) out.push_back(s.id);
  return out;
}

// --- 1 -------------------------------------------------------------------

Outcome loss_oracle() {
  Outcome o;
  const std::vector<std::uint8_t> all(4, 1);
  const std::vector<double> flat(4, 0.0);

  const std::vector<double> probs = softmax_probs(flat, 0.02, all);
  const std::vector<std::uint8_t> one{1, 0, 0, 0};
  const double uniform = objective_loss(clip_probs(probs, 1), one, all);
  o.require(std::fabs(uniform - std::log(4.0)) <= 1e-9, "uniform loss " + fmt(uniform, 17));
  o.note("uniform 4-slot loss - ln 4 = " + fmt(uniform - std::log(4.0), 3));

  const std::vector<std::uint8_t> none(4, 0);
  const double empty = objective_loss(clip_probs(probs, 0), none, all);
  o.require(empty == 0.0, "no-positive loss " + fmt(empty));
  LossWeights w;
  const LossBreakdown b = total_loss({0.0, 0.7, 0.0, 0.0}, {0, 2, 0, 0}, w);
  o.require(b.weight[0] == 0.0 && b.weighted[0] == 0.0, "empty objective has nonzero weight");
  o.require(std::fabs(b.total - 0.35) < 1e-15, "inverse-count total " + fmt(b.total, 17));

  // Slot 0 dominates: 2 * p0 clips to 1, so only slot 1 contributes.
  const std::vector<double> peaked{0.1, 0.0, 0.0, 0.0};
  const std::vector<double> pp = softmax_probs(peaked, 0.02, all);
  const std::vector<double> yhat = clip_probs(pp, 2);
  o.require(yhat[0] == 1.0, "dominant positive not clipped to 1");
  const std::vector<std::uint8_t> two{1, 1, 0, 0}, second{0, 1, 0, 0};
  const double both = objective_loss(yhat, two, all);
  const double only_second = objective_loss(yhat, second, all);
  o.require(both == only_second, "clipped positive changed the loss");
  const double direct = -std::log(2.0 / (std::exp(5.0) + 3.0));
  o.require(std::fabs(both - direct) <= 1e-9 * direct, "clipped case " + fmt(both, 17) + " vs " + fmt(direct, 17));
  return o;
}

// --- 2 -------------------------------------------------------------------

Outcome gradient_check() {
  Outcome o;
  const FeatureSpace space = fixtures::tiny_space();
  const TwoTowerModel<double> model(fixtures::tiny_model(4, 4), space);
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::uint64_t seed : {31u, 32u, 33u}) {
    const Parameters<double> p = model.init_parameters(seed);
    std::mt19937_64 rng(seed);
    const BatchInputs in = fixtures::one_sample_inputs(rng, space);
    LossBreakdown lb;
    Parameters<double> g = model.zero_parameters();
    lb = batch_loss(model, p, in, LossWeights{}, &g).breakdown;
    for (int k = 0; k < kNumObjectives; ++k) o.require(lb.positives[static_cast<std::size_t>(k)] > 0, "objective inactive");
    const fixtures::GradCheck r = fixtures::finite_difference_check(model, p, in, LossWeights{});
    checked += r.checked;
    if (r.max_rel_error > worst) worst = r.max_rel_error;
    o.require(r.max_rel_error < 1e-5, "seed " + std::to_string(seed) + " worst " + r.worst);
  }
  o.note(std::to_string(checked) + " parameter entries, max relative error " + fmt(worst, 3));
  return o;
}

// --- 3 -------------------------------------------------------------------

Outcome tower_contracts() {
  Outcome o;
  const FeatureSpace space = fixtures::tiny_space();
  const TwoTowerModel<double> model(fixtures::tiny_model(4, 6), space);
  Parameters<double> p = model.init_parameters(3);
  std::mt19937_64 rng(3);

  std::vector<UserQueryFeatures> uq;
  for (int k = 0; k < 40; ++k)
    uq.push_back(fixtures::random_user_query(rng, space, 1 + k % 4, {k % 3, (k / 3) % 3, 1 + k % 5}));
  std::vector<ItemFeatures> items;
  for (ItemId id = 0; id < 12; ++id) items.push_back(fixtures::random_item(rng, space, id));
  double norm_err = 0.0;
  const Mat<double> U = model.user_query_forward(p, uq);
  const Mat<double> V = model.item_forward(p, items);
  for (Eigen::Index r = 0; r < U.rows(); ++r) norm_err = std::max(norm_err, std::fabs(U.row(r).norm() - 1.0));
  for (Eigen::Index r = 0; r < V.rows(); ++r) norm_err = std::max(norm_err, std::fabs(V.row(r).norm() - 1.0));
  const TwoTowerModel<float> fmodel(fixtures::tiny_model(4, 6), space);
  const Parameters<float> fp = fmodel.init_parameters(3);
  const Mat<float> Uf = fmodel.user_query_forward(fp, uq);
  for (Eigen::Index r = 0; r < Uf.rows(); ++r)
    norm_err = std::max(norm_err, std::fabs(static_cast<double>(Uf.row(r).norm()) - 1.0));
  o.require(norm_err <= 1e-6, "norm error " + fmt(norm_err));
  o.note("max |norm - 1| " + fmt(norm_err, 2));

  std::normal_distribution<double> g(0.0, 1.0);
  auto randm = [&](int r, int c) {
    Mat<double> m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
    return m;
  };
  const Mat<double> term = randm(1, 4);
  const RowVec<double> qo = query_semantic_unit<double>(term, randm(1, 6), randm(6, 4), randm(1, 4));
  double collapse = 0.0;
  for (int part = 0; part < 3; ++part)
    for (int j = 0; j < 4; ++j) collapse = std::max(collapse, std::fabs(qo(part * 4 + j) - term(0, j)));
  o.require(collapse < 1e-12, "singleton query collapse off by " + fmt(collapse));

  const RowVec<double> empty = behavior_attention<double>(randm(1, 9), randm(9, 6), randm(1, 6), Mat<double>(0, 6));
  o.require(empty.size() == 6 && empty.isZero(0.0), "empty partition is not the zero vector");

  // Item embeddings ignore user-side features and parameters.
  std::vector<UserQueryFeatures> other = uq;
  for (UserQueryFeatures& f : other) {
    f.user = (f.user + 1) % space.num_users;
    f.profile = {0, 0, 0};
    f.behaviors = {};
  }
  (void)model.user_query_forward(p, other);
  const ParameterLayout& L = model.layout();
  std::vector<int> uq_only{L.user_id, L.age, L.gender, L.power, L.query_id, L.query_freq, L.query_term, L.w1, L.b1};
  for (int k = 0; k < kPartitions; ++k) {
    uq_only.push_back(L.w_behavior[k]);
    uq_only.push_back(L.b_behavior[k]);
  }
  for (std::size_t i = 0; i < L.size(); ++i)
    if (L.names[i].rfind("mlp_uq.", 0) == 0) uq_only.push_back(static_cast<int>(i));
  for (int t : uq_only) p[t] = randm(static_cast<int>(p[t].rows()), static_cast<int>(p[t].cols()));
  o.require(model.item_forward(p, items) == V, "item embeddings moved with user-side changes");
  o.require(!(model.user_query_forward(p, uq) == U), "user-side scramble had no effect");
  return o;
}

// --- 4 -------------------------------------------------------------------

Outcome metric_oracles() {
  Outcome o;
  const std::vector<ItemId> t12{1, 2};
  o.require(recall_at_k(std::vector<ItemId>{1, 7, 8}, t12) == 0.5, "recall 1/2");
  o.require(recall_at_k(std::vector<ItemId>{2, 9, 1}, t12) == 1.0, "recall 1");
  o.require(recall_at_k(std::vector<ItemId>{5, 6, 7}, t12) == 0.0, "recall 0");

  const double k2 = ndcg_at_k(std::vector<ItemId>{10, 11}, std::vector<ItemId>{10});
  o.require(std::fabs(k2 - 0.61315) <= 1e-5, "K=2 nDCG " + fmt(k2, 8));
  o.note("K=2 nDCG " + fmt(k2, 6));
  double ideal5 = 0.0;
  for (int k = 1; k <= 5; ++k) ideal5 += 1.0 / std::log2(k + 1.0);
  const double n5 = ndcg_at_k(std::vector<ItemId>{1, 9, 2, 7, 8}, t12);
  o.require(std::fabs(n5 - 1.5 / ideal5) < 1e-12, "K=5 nDCG " + fmt(n5, 10));
  o.require(ndcg_at_k(std::vector<ItemId>{3, 4, 5}, std::vector<ItemId>{9}) == 0.0, "nDCG without hits");

  o.require(p_good(std::vector<std::uint8_t>{1, 0, 1, 0, 1, 0}) == 0.5, "P_good 1/2");
  o.require(p_good(std::vector<std::uint8_t>{1, 1, 1}) == 1.0, "P_good 1");
  o.require(p_good(std::vector<std::uint8_t>{0, 0, 0, 1}) == 0.25, "P_good 1/4");
  return o;
}

// --- 5 -------------------------------------------------------------------

Outcome retrieval_oracles() {
  Outcome o;
  std::mt19937_64 rng(5);

  // Exact search against a naive full scan.
  const Mat<float> v = random_rows(rng, 1000, 16, false);
  long compared = 0;
  for (bool quantize : {false, true}) {
    IndexConfig cfg;
    cfg.quantize = quantize;
    cfg.branching = 8;
    cfg.max_leaf = 16;
    const EmbeddingIndex idx = EmbeddingIndex::build(iota_ids(1000), v, cfg);
    for (int q = 0; q < 20; ++q) {
      const std::vector<float> query = row_of(random_rows(rng, 1, 16, false), 0);
      std::vector<ScoredItem> scan;
      for (std::size_t r = 0; r < idx.size(); ++r) {
        const std::vector<float> sv = idx.stored_vector(r);
        double s = 0.0;
        for (std::size_t j = 0; j < sv.size(); ++j) s += static_cast<double>(sv[j]) * query[j];
        o.require(std::fabs(s - idx.score_row(r, query)) < 1e-5, "row score disagrees with a direct dot product");
        scan.push_back({idx.ids()[r], idx.score_row(r, query)});
      }
      std::sort(scan.begin(), scan.end(), [](const ScoredItem& a, const ScoredItem& b) {
        return a.score != b.score ? a.score > b.score : a.id < b.id;
      });
      for (int k : {1, 10, 100, 1000}) {
        const std::vector<ScoredItem> want(scan.begin(), scan.begin() + k);
        o.require(search_exact(idx, query, k) == want, "exact search differs from the scan at K=" + std::to_string(k));
        o.require(search_ann(idx, query, k, 1 << 20) == search_exact(idx, query, k),
                  "exhaustive-beam ANN differs at K=" + std::to_string(k));
        ++compared;
      }
    }
  }
  o.note(std::to_string(compared) + " scan/exact/ANN comparisons");

  double worst = 0.0;
  std::uniform_real_distribution<double> mag(-3.0, 3.0);
  for (int trial = 0; trial < 10000; ++trial) {
    Mat<float> x = random_rows(rng, 1, 32, false) * static_cast<float>(std::pow(10.0, mag(rng)));
    const std::vector<float> xv = row_of(x, 0);
    const QuantizedVector qv = quantize_int8(xv);
    const std::vector<float> back = dequantize(qv);
    for (std::size_t k = 0; k < xv.size(); ++k)
      worst = std::max(worst, std::fabs(static_cast<double>(xv[k]) - back[k]) / qv.scale);
  }
  // Float rounding of code * scale is the only slack.
  o.require(worst <= 0.5 + 1e-6, "INT8 error ratio " + fmt(worst, 8));
  o.note("INT8 worst error " + fmt(worst, 6) + " x scale");

  // Tuned beam on a 100k-item world: latent item vectors, user+query intents.
  WorldConfig wc;
  wc.num_items = 100000;
  wc.seed = 7;
  const World world = generate_world(wc);
  const int d = wc.latent_dim;
  Mat<float> corpus(wc.num_items, d);
  for (const CatalogItem& it : world.items)
    for (int j = 0; j < d; ++j) corpus(it.id, j) = static_cast<float>(it.latent[static_cast<std::size_t>(j)]);
  const EmbeddingIndex idx = EmbeddingIndex::build(iota_ids(wc.num_items), corpus, IndexConfig{});
  const int K = resolve_k(0, world.items.size());
  std::mt19937_64 qrng(77);
  auto intent = [&]() {
    const SynthUser& u = world.users[fixtures::pick(qrng, static_cast<int>(world.users.size()))];
    const SynthQuery& q = world.queries[fixtures::pick(qrng, static_cast<int>(world.queries.size()))];
    std::vector<float> out(static_cast<std::size_t>(d));
    double n = 0.0;
    for (int j = 0; j < d; ++j) {
      out[j] = static_cast<float>(u.latent[j] + q.latent[j]);
      n += out[j] * out[j];
    }
    for (float& x : out) x = static_cast<float>(x / std::sqrt(n));
    return out;
  };
  std::vector<std::vector<float>> tune, test;
  for (int i = 0; i < 20; ++i) tune.push_back(intent());
  for (int i = 0; i < 50; ++i) test.push_back(intent());
  std::vector<std::vector<ItemId>> tune_exact, test_exact;
  for (const auto& q : tune) tune_exact.push_back(ids_of(search_exact(idx, q, K)));
  for (const auto& q : test) test_exact.push_back(ids_of(search_exact(idx, q, K)));
  auto overlap = [&](const std::vector<std::vector<float>>& qs, const std::vector<std::vector<ItemId>>& exact,
                     int beam) {
    double sum = 0.0;
    for (std::size_t i = 0; i < qs.size(); ++i) {
      const std::vector<ItemId> got = ids_of(search_ann(idx, qs[i], K, beam));
      sum += recall_at_k(got, exact[i]);
    }
    return sum / static_cast<double>(qs.size());
  };
  int beam = 16;
  double tuned = overlap(tune, tune_exact, beam);
  while (tuned < 0.95 && beam < static_cast<int>(idx.tree()->nodes.size())) {
    beam *= 2;
    tuned = overlap(tune, tune_exact, beam);
  }
  const double measured = overlap(test, test_exact, beam);
  o.require(measured >= 0.95, "held-out overlap " + fmt(measured));
  o.note("100k items, K=" + std::to_string(K) + ", tuned beam " + std::to_string(beam) + ", overlap " +
         fmt(measured) + " on 50 held-out intents");
  return o;
}

// --- 6 -------------------------------------------------------------------

Outcome gmv_identity() {
  Outcome o;
  std::mt19937_64 rng(6);
  std::lognormal_distribution<double> price(3.0, 1.0);
  const double sigma = 0.1;
  double worst = 0.0;
  for (int t = 0; t < 2000; ++t) {
    const std::vector<float> uq = row_of(random_rows(rng, 1, 8, true), 0);
    const std::vector<float> it = row_of(random_rows(rng, 1, 8, true), 0);
    const double p = price(rng);
    const GmvAugmented a = gmv_augment(uq, sigma, it, p);
    const double z = score(uq, it);
    worst = std::max(worst, std::fabs(a.score - (z + sigma * std::log(p))));
  }
  o.require(worst <= 1e-6, "identity error " + fmt(worst));
  o.note("max identity error " + fmt(worst, 2));

  const int n = 3000;
  const Mat<float> items = random_rows(rng, n, 16, true);
  std::vector<double> prices;
  for (int i = 0; i < n; ++i) prices.push_back(price(rng));
  IndexConfig cfg;
  cfg.gmv = true;
  cfg.sigma = sigma;
  const EmbeddingIndex idx = EmbeddingIndex::build(iota_ids(n), items, cfg, prices);
  for (int q = 0; q < 10; ++q) {
    const std::vector<float> uq = row_of(random_rows(rng, 1, 16, true), 0);
    const std::vector<ItemId> got = ids_of(search_exact(idx, augment_query(uq, sigma), n));
    std::vector<std::pair<double, ItemId>> gmv;
    for (int i = 0; i < n; ++i) gmv.push_back({std::exp(score(uq, row_of(items, i)) / sigma) * prices[i], i});
    std::sort(gmv.begin(), gmv.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    std::vector<ItemId> want;
    for (const auto& g : gmv) want.push_back(g.second);
    o.require(got == want, "augmented ordering differs from exp(z/sigma)*price for query " + std::to_string(q));
  }
  o.note("full-corpus ordering equal on 10 queries x " + std::to_string(n) + " items");
  return o;
}

// --- 7, 8, 9 -------------------------------------------------------------

struct SeedRun {
  std::uint64_t seed = 0;
  std::map<std::string, MetricsReport> reports;
  std::array<double, 5> class_means{};
  std::array<long, 5> class_counts{};
};

const char* const kClassNames[5] = {"purchased", "clicked-not-purchased", "non-clicked impression",
                                    "relevant under-impression", "random irrelevant"};

void score_classes(const Checkpoint& ckpt, const Dataset& data, SeedRun& out) {
  std::vector<EvalRecord> triples;
  for (const PageView& pv : data.heldout_pages) {
    EvalRecord r;
    r.user = pv.user_id;
    r.query = pv.query_id;
    r.ts = pv.ts;
    triples.push_back(r);
  }
  const Mat<float> U = embed_records(ckpt, data.world, triples);
  const Mat<float> V = embed_catalog(ckpt, data.world);
  std::array<double, 5> sum{};
  std::mt19937_64 rng(out.seed * 1000 + 9);
  const int n_items = static_cast<int>(data.world.items.size());
  for (std::size_t i = 0; i < data.heldout_pages.size(); ++i) {
    const PageView& pv = data.heldout_pages[i];
    auto add = [&](int cls, ItemId item) {
      sum[cls] += static_cast<double>(U.row(static_cast<Eigen::Index>(i)).dot(V.row(item)));
      ++out.class_counts[cls];
    };
    for (const Impression& im : pv.impressions) add(im.purchased ? 0 : im.clicked ? 1 : 2, im.item);
    for (const UnderImpression& ui : pv.under_impressions)
      if (ui.relevant) add(3, ui.item);
    for (int drawn = 0; drawn < 10;) {
      const ItemId item = fixtures::pick(rng, n_items);
      if (relevance_oracle(data.world, pv.query_id, item)) continue;
      add(4, item);
      ++drawn;
    }
  }
  for (int c = 0; c < 5; ++c)
    out.class_means[c] = out.class_counts[c] ? sum[c] / static_cast<double>(out.class_counts[c]) : NAN;
}

ExperimentConfig directional_config(std::uint64_t seed) {
  ExperimentConfig c;
  c.seed = seed;
  c.train.steps = 2000;
  // Purchases must depend on more than click affinity for the purchase loss to carry signal.
  c.world.price_sensitivity = 3.0;
  c.out_dir = "";
  c.resolve();
  return c;
}

std::vector<Variant> directional_variants() {
  std::vector<Variant> out{single_positive_baseline()};
  for (const Variant& v : component_ablation_variants())
    if (v.name == "without relevance loss" || v.name == "without purchase loss" || v.name == "without UI")
      out.push_back(v);
  return out;
}

std::vector<SeedRun> directional_runs() {
  std::vector<SeedRun> runs;
  for (std::uint64_t seed : {7u, 8u, 9u}) {
    const auto t0 = std::chrono::steady_clock::now();
    const ExperimentConfig base = directional_config(seed);
    const Dataset data = generate_dataset(base);
    SeedRun run;
    run.seed = seed;
    const TrainResult full = train_experiment(data, base);
    run.reports["full"] = evaluate(full.checkpoint, data.records, data.world, base.eval.k);
    score_classes(full.checkpoint, data, run);
    for (const Variant& v : directional_variants()) {
      const ExperimentConfig cfg = apply_variant(base, v);
      const TrainResult r = train_experiment(data, cfg);
      run.reports[v.name] = evaluate(r.checkpoint, data.records, data.world, cfg.eval.k);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "  seed " << seed << ": " << data.world.items.size() << " items, " << data.train_pages.size()
              << " training pages, " << data.heldout_pages.size() << " held-out pages, " << fmt(secs, 3) << " s"
              << std::endl;
    for (const auto& [name, m] : run.reports)
      std::cout << "    " << std::left << std::setw(32) << name << " recall_p " << fmt(m.recall_p, 5) << "  ndcg_p "
                << fmt(m.ndcg_p, 5) << "  p_good " << fmt(m.p_good, 5) << std::endl;
    std::cout << "    mean scores:";
    for (int c = 0; c < 5; ++c) std::cout << " " << kClassNames[c] << " " << fmt(run.class_means[c], 4) << ";";
    std::cout << std::endl;
    runs.push_back(run);
  }
  return runs;
}

Outcome beats_baseline(const std::vector<SeedRun>& runs) {
  Outcome o;
  const std::string base = single_positive_baseline().name;
  for (const SeedRun& r : runs) {
    const MetricsReport& f = r.reports.at("full");
    const MetricsReport& b = r.reports.at(base);
    const std::string s = "seed " + std::to_string(r.seed);
    o.require(f.recall_p > b.recall_p, s + " recall_p " + fmt(f.recall_p) + " <= " + fmt(b.recall_p));
    o.require(f.ndcg_p > b.ndcg_p, s + " ndcg_p " + fmt(f.ndcg_p) + " <= " + fmt(b.ndcg_p));
    o.require(f.p_good > b.p_good, s + " p_good " + fmt(f.p_good) + " <= " + fmt(b.p_good));
    o.note(s + " margins recall_p " + fmt(f.recall_p - b.recall_p, 3) + ", ndcg_p " + fmt(f.ndcg_p - b.ndcg_p, 3) +
           ", p_good " + fmt(f.p_good - b.p_good, 3));
  }
  return o;
}

Outcome ablation_directions(const std::vector<SeedRun>& runs) {
  Outcome o;
  struct Direction {
    std::string variant;
    const char* metric;
    double MetricsReport::*field;
  };
  const Direction dirs[] = {{"without relevance loss", "p_good", &MetricsReport::p_good},
                            {"without purchase loss", "ndcg_p", &MetricsReport::ndcg_p},
                            {"without UI", "p_good", &MetricsReport::p_good}};
  for (const Direction& d : dirs) {
    int held = 0;
    for (const SeedRun& r : runs)
      if (r.reports.at(d.variant).*d.field < r.reports.at("full").*d.field) ++held;
    o.require(held >= 2, d.variant + " lowers " + d.metric + " on only " + std::to_string(held) + "/3 seeds");
    o.note(d.variant + " lowers " + d.metric + " on " + std::to_string(held) + "/3");
  }
  return o;
}

Outcome sorted_order(const std::vector<SeedRun>& runs) {
  Outcome o;
  int held = 0;
  for (const SeedRun& r : runs) {
    std::string broken;
    for (int c = 0; c + 1 < 5; ++c)
      if (!(r.class_counts[c] > 0 && r.class_counts[c + 1] > 0 && r.class_means[c] > r.class_means[c + 1]))
        broken += std::string(broken.empty() ? "" : ", ") + kClassNames[c] + " " + fmt(r.class_means[c], 5) +
                  " !> " + kClassNames[c + 1] + " " + fmt(r.class_means[c + 1], 5);
    held += broken.empty();
    o.note("seed " + std::to_string(r.seed) + (broken.empty() ? " ordered" : " out of order: " + broken));
  }
  o.require(held >= 2, "order holds on " + std::to_string(held) + "/3 seeds");
  return o;
}

// --- 10 ------------------------------------------------------------------

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_text_file(e.path());
  return out;
}

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.world.num_users = 300;
  c.world.num_queries = 80;
  c.world.num_items = 2000;
  c.world.num_categories = 16;
  c.world.num_super_categories = 4;
  c.world.vocab_size = 800;
  c.world.num_brands = 60;
  c.world.num_sellers = 80;
  c.train_pages = 1500;
  c.eval.heldout_pages = 400;
  c.eval.click_records = 200;
  c.eval.purchase_records = 100;
  c.eval.offsite_records = 100;
  c.train.steps = 60;
  c.train.batch_size_B = 16;
  c.train.checkpoint_every = 20;
  c.samples.online_hard_mining = true;
  c.samples.extra_hard_negatives = 4;
  c.index.quantize = true;
  c.seed = 21;
  c.resolve();
  return c;
}

Outcome determinism() {
  Outcome o;
  const fs::path root = fs::temp_directory_path() / "moppr_acceptance_det";
  fs::remove_all(root);
  const ExperimentConfig cfg = small_config();
  std::vector<std::string> stages;

  std::map<std::string, std::string> files[2];
  std::string evals[2], indexes[2], ablations[2];
  std::vector<std::vector<ScoredItem>> hits[2];
  for (int rep = 0; rep < 2; ++rep) {
    const fs::path dir = root / std::to_string(rep);
    const Dataset data = generate_dataset(cfg);
    write_dataset(data, cfg, dir);
    const Dataset loaded = load_dataset(dir);

    TrainOptions opts;
    opts.out_dir = dir / "train";
    const TrainResult trained = train_experiment(loaded, cfg, opts);

    // Resume from the middle checkpoint into a separate directory.
    ExperimentConfig rcfg = cfg;
    TrainOptions ropts;
    ropts.out_dir = dir / "resumed";
    ropts.resume = load_checkpoint(checkpoint_path(opts.out_dir, 20));
    const TrainResult resumed = train_experiment(loaded, rcfg, ropts);
    save_checkpoint(resumed.checkpoint, dir / "resumed_final.ckpt");

    evals[rep] = report_to_json(evaluate(trained.checkpoint, loaded.records, loaded.world, cfg.eval.k)).dump();

    for (bool gmv : {false, true}) {
      IndexConfig ic = cfg.index;
      ic.gmv = gmv;
      const EmbeddingIndex idx = build_item_index(trained.checkpoint, loaded.world, ic);
      const fs::path ipath = dir / (gmv ? "index_gmv.bin" : "index.bin");
      idx.save(ipath);
      indexes[rep] += read_text_file(ipath);
      const Mat<float> U = embed_records(trained.checkpoint, loaded.world, loaded.records);
      for (Eigen::Index r = 0; r < std::min<Eigen::Index>(U.rows(), 25); ++r) {
        std::vector<float> q = row_of(U, r);
        if (gmv) q = augment_query(q, ic.sigma);
        hits[rep].push_back(search_exact(idx, q, 50));
        hits[rep].push_back(search_ann(idx, q, 50, ic.beam));
      }
    }

    ExperimentConfig acfg = cfg;
    acfg.train.steps = 20;
    acfg.train.checkpoint_every = 0;
    ablations[rep] = ablation_run(loaded, acfg, {single_positive_baseline(), component_ablation_variants()[5]}).csv();
    files[rep] = tree_bytes(dir);
  }
  o.require(!files[0].empty() && files[0] == files[1], "written files differ between runs");
  for (const auto& [name, bytes] : files[0])
    if (files[1].count(name) && files[1].at(name) != bytes) o.require(false, name + " differs");
  o.require(files[0].at("resumed_final.ckpt") == files[0].at("train/model.ckpt"), "resumed run differs");
  o.require(evals[0] == evals[1], "metrics differ");
  o.require(indexes[0] == indexes[1], "index bytes differ");
  o.require(hits[0] == hits[1], "retrieval results differ");
  o.require(ablations[0] == ablations[1], "ablation tables differ");
  o.note(std::to_string(files[0].size()) + " files (world, logs, samples, checkpoints, step log, indexes) "
         "identical; metrics, retrieval and ablation identical; resume identical");
  fs::remove_all(root);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const bool strict = argc > 1 && std::string(argv[1]) == "--strict";
  std::cout << std::unitbuf;
  run(1, "loss oracle", loss_oracle);
  run(2, "gradient correctness", gradient_check);
  run(3, "tower contracts", tower_contracts);
  run(4, "metric oracles", metric_oracles);
  run(5, "retrieval oracles", retrieval_oracles);
  run(6, "GMV identity", gmv_identity);

  std::vector<SeedRun> runs;
  std::string setup_error;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    runs = directional_runs();
  } catch (const std::exception& e) {
    setup_error = e.what();
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "  directional runs: " << fmt(secs, 4) << " s total" << std::endl;
  auto shared = [&](Outcome (*fn)(const std::vector<SeedRun>&)) {
    return [&, fn]() {
      if (!setup_error.empty()) throw std::runtime_error("training runs failed: " + setup_error);
      return fn(runs);
    };
  };
  run(7, "full model beats the single-positive click baseline", shared(beats_baseline));
  run(8, "loss and sample ablation directions", shared(ablation_directions));
  run(9, "sorted-order property on held-out pages", shared(sorted_order));
  run(10, "determinism of every stage", determinism);

  std::cout << (failures ? "acceptance: " + std::to_string(failures) + " criterion(s) failed" : "acceptance: all passed")
            << std::endl;
  return strict && failures ? 1 : 0;
}
