#include "moppr/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "moppr/world_io.hpp"

namespace moppr {

namespace {

constexpr std::uint64_t kStreamTrainLogs = 1;
constexpr std::uint64_t kStreamHeldoutLogs = 2;
constexpr std::size_t kShardSize = 4096;

nlohmann::json dataset_manifest(const Dataset& d, const ExperimentConfig& c) {
  nlohmann::json counts;
  std::array<long, kNumSources> per{};
  for (const EvalRecord& r : d.records) ++per[static_cast<int>(r.source)];
  for (int s = 0; s < kNumSources; ++s) counts[source_name(static_cast<RecordSource>(s))] = per[s];
  return {{"seed", c.seed},
          {"train_pages", {{"requested", d.train_requested},
                           {"skipped_empty", d.train_skipped_empty},
                           {"emitted", d.train_pages.size()}}},
          {"heldout_pages", {{"requested", d.heldout_requested},
                             {"skipped_empty", d.heldout_skipped_empty},
                             {"emitted", d.heldout_pages.size()}}},
          {"eval_records", counts}};
}

}  // namespace

Dataset generate_dataset(const ExperimentConfig& config) {
  Dataset d;
  d.world = generate_world(config.world);
  LogSimulation train = simulate_logs(d.world, config.train_pages, kStreamTrainLogs);
  d.train_requested = train.requested;
  d.train_skipped_empty = train.skipped_empty;
  d.train_pages = std::move(train.pages);
  accumulate_item_stats(d.world, d.train_pages);
  LogSimulation heldout = simulate_logs(d.world, config.eval.heldout_pages, kStreamHeldoutLogs);
  d.heldout_requested = heldout.requested;
  d.heldout_skipped_empty = heldout.skipped_empty;
  d.heldout_pages = std::move(heldout.pages);
  d.records = build_eval_records(d.world, d.heldout_pages, config.eval);
  return d;
}

void echo_config(const ExperimentConfig& config, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text_file(dir / "config.json", nlohmann::json(config).dump(2) + "\n");
}

void write_dataset(const Dataset& d, const ExperimentConfig& config, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "data");
  save_world(d.world, dir / "world");
  write_page_log(dir / "data" / "train_pages.jsonl", d.train_pages);
  write_page_log(dir / "data" / "heldout_pages.jsonl", d.heldout_pages);
  write_eval_records(dir / "data" / "eval_records.jsonl", d.records);

  // First-epoch training samples exactly as the trainer will see them.
  std::filesystem::create_directories(dir / "samples");
  SampleConfig sc = config.samples;
  sc.batch_size_B = config.train.batch_size_B;
  std::size_t units = 0;
  int shards = 0;
  if (!d.train_pages.empty()) {
    try {
      const BatchSource source(d.world, d.train_pages, sc, config.train.seed, config.train.hard_pool_size);
      units = source.units();
      std::vector<TrainingSample> buffer;
      auto flush = [&] {
        if (buffer.empty()) return;
        std::ostringstream name;
        name << "shard_" << std::setw(5) << std::setfill('0') << shards++ << ".jsonl";
        write_sample_shard(dir / "samples" / name.str(), buffer);
        buffer.clear();
      };
      const auto B = static_cast<std::size_t>(sc.batch_size_B);
      for (std::size_t step = 0; step * B < units; ++step) {
        Batch batch = source.batch(static_cast<std::int64_t>(step));
        for (std::size_t b = 0; b < batch.samples.size() && step * B + b < units; ++b) {
          buffer.push_back(std::move(batch.samples[b]));
          if (buffer.size() == kShardSize) flush();
        }
      }
      flush();
    } catch (const InvalidInput&) {
      units = 0;  // no page passes the click filter; nothing to shard
    }
  }
  nlohmann::json sample_manifest = {{"sample_config", sc},
                                    {"seed", config.train.seed},
                                    {"units", units},
                                    {"shards", shards},
                                    {"shard_size", kShardSize}};
  write_text_file(dir / "samples" / "manifest.json", sample_manifest.dump(2) + "\n");
  write_text_file(dir / "manifest.json", dataset_manifest(d, config).dump(2) + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "world" / "manifest.json"))
    throw NotFound("no generated data under " + dir.string() + " (run gen first)");
  Dataset d;
  d.world = load_world(dir / "world");
  d.train_pages = read_page_log(dir / "data" / "train_pages.jsonl", d.world.config.page_size_N);
  d.heldout_pages = read_page_log(dir / "data" / "heldout_pages.jsonl", d.world.config.page_size_N);
  d.records = read_eval_records(dir / "data" / "eval_records.jsonl");
  for (const PageView& pv : d.train_pages)
    for (const Impression& imp : pv.impressions)
      if (!d.world.has_item(imp.item)) throw DataIntegrity("training log references unknown item");
  const nlohmann::json m = nlohmann::json::parse(read_text_file(dir / "manifest.json"));
  d.train_requested = m.at("train_pages").at("requested").get<int>();
  d.train_skipped_empty = m.at("train_pages").at("skipped_empty").get<int>();
  d.heldout_requested = m.at("heldout_pages").at("requested").get<int>();
  d.heldout_skipped_empty = m.at("heldout_pages").at("skipped_empty").get<int>();
  return d;
}

TrainResult train_experiment(const Dataset& data, const ExperimentConfig& config, const TrainOptions& options) {
  return train(data.world, data.train_pages, config.model, config.samples, config.train, options);
}

EmbeddingIndex build_item_index(const Checkpoint& ckpt, const World& world, const IndexConfig& config) {
  const Mat<float> items = embed_catalog(ckpt, world);
  std::vector<ItemId> ids(world.items.size());
  std::vector<double> prices(world.items.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    ids[i] = static_cast<ItemId>(i);
    prices[i] = world.items[i].price;
  }
  return EmbeddingIndex::build(std::move(ids), items, config, prices);
}

std::vector<Variant> parse_variants(const nlohmann::json& j) {
  if (!j.is_array()) throw InvalidConfig("variant file must hold a JSON array");
  std::vector<Variant> out;
  for (const auto& v : j) {
    if (!v.is_object() || !v.contains("name")) throw InvalidConfig("each variant needs a name");
    Variant var;
    var.name = v.at("name").get<std::string>();
    var.patch = v.value("patch", nlohmann::json::object());
    for (const auto& [key, value] : v.items())
      if (key != "name" && key != "patch") throw InvalidConfig("unknown variant field " + key);
    out.push_back(std::move(var));
  }
  return out;
}

std::vector<Variant> component_ablation_variants() {
  auto without = [](ObjectiveId drop) {
    nlohmann::json enabled = nlohmann::json::array();
    for (ObjectiveId o : kAllObjectives)
      if (o != drop) enabled.push_back(objective_name(o));
    return Variant{std::string("without ") + objective_name(drop) + " loss",
                   {{"train", {{"enabled_objectives", enabled}}}}};
  };
  return {without(ObjectiveId::Relevance),
          without(ObjectiveId::Exposure),
          without(ObjectiveId::Click),
          without(ObjectiveId::Purchase),
          {"without NCI", {{"samples", {{"drop_non_clicked_impressions", true}}}}},
          {"without UI", {{"samples", {{"drop_under_impressions", true}}}}},
          {"without NCI and UI",
           {{"samples", {{"drop_non_clicked_impressions", true}, {"drop_under_impressions", true}}}}}};
}

std::vector<Variant> negative_sweep_variants(const std::vector<int>& total_negatives, int batch_size) {
  std::vector<Variant> out;
  for (int L : total_negatives) {
    const int per = std::max(1, L / std::max(1, batch_size));
    out.push_back({"L=" + std::to_string(per * batch_size), {{"samples", {{"rand_neg_per_sample", per}}}}});
  }
  return out;
}

Variant single_positive_baseline() {
  return {"single-positive click baseline",
          {{"samples", {{"mode", "single_positive_click"}}}, {"train", {{"enabled_objectives", {"click"}}}}}};
}

ExperimentConfig apply_variant(const ExperimentConfig& base, const Variant& v) {
  if (v.patch.contains("world") || v.patch.contains("train_pages") || v.patch.contains("seed") ||
      v.patch.contains("eval"))
    throw InvalidConfig("variant " + v.name + " may not change the data or the seed");
  nlohmann::json j = base;
  j.merge_patch(v.patch);
  ExperimentConfig out = parse_experiment_config(j);
  out.resolve();
  return out;
}

std::string AblationTable::csv() const {
  std::ostringstream out;
  out.precision(10);
  out << "variant,status,recall,ndcg,recall_p,ndcg_p,p_good,d_recall,d_ndcg,d_recall_p,d_ndcg_p,d_p_good\n";
  const MetricsReport* base = !rows.empty() && rows[0].ok ? &rows[0].report : nullptr;
  for (const AblationRow& r : rows) {
    out << '"' << r.name << "\"," << (r.ok ? "ok" : "failed");
    if (r.ok) {
      const MetricsReport& m = r.report;
      out << ',' << m.recall << ',' << m.ndcg << ',' << m.recall_p << ',' << m.ndcg_p << ',' << m.p_good;
      if (base)
        out << ',' << m.recall - base->recall << ',' << m.ndcg - base->ndcg << ',' << m.recall_p - base->recall_p
            << ',' << m.ndcg_p - base->ndcg_p << ',' << m.p_good - base->p_good;
      else
        out << ",,,,,";
    } else {
      out << ",,,,,,,,,,";
    }
    out << '\n';
  }
  return out.str();
}

std::string AblationTable::text() const {
  std::ostringstream out;
  const MetricsReport* base = !rows.empty() && rows[0].ok ? &rows[0].report : nullptr;
  std::size_t width = 8;
  for (const AblationRow& r : rows) width = std::max(width, r.name.size());
  out << std::left << std::setw(static_cast<int>(width)) << "variant";
  for (const char* h : {"recall", "ndcg", "recall_p", "ndcg_p", "p_good"}) out << "  " << std::setw(18) << h;
  out << '\n';
  for (const AblationRow& r : rows) {
    out << std::left << std::setw(static_cast<int>(width)) << r.name;
    if (!r.ok) {
      out << "  failed: " << r.error << '\n';
      continue;
    }
    const MetricsReport& m = r.report;
    const double vals[] = {m.recall, m.ndcg, m.recall_p, m.ndcg_p, m.p_good};
    const double refs[] = {base ? base->recall : 0, base ? base->ndcg : 0, base ? base->recall_p : 0,
                           base ? base->ndcg_p : 0, base ? base->p_good : 0};
    for (int k = 0; k < 5; ++k) {
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(4) << vals[k];
      if (base && &r != &rows[0]) {
        const double rel = refs[k] != 0.0 ? 100.0 * (vals[k] - refs[k]) / refs[k] : 0.0;
        cell << " (" << std::showpos << std::setprecision(1) << rel << "%)";
      }
      out << "  " << std::setw(18) << cell.str();
    }
    out << '\n';
  }
  return out.str();
}

AblationTable ablation_run(const Dataset& data, const ExperimentConfig& base, const std::vector<Variant>& variants,
                           std::ostream* progress) {
  AblationTable table;
  auto run = [&](const std::string& name, const ExperimentConfig& cfg) {
    AblationRow row;
    row.name = name;
    try {
      const TrainResult tr = train_experiment(data, cfg);
      row.report = evaluate(tr.checkpoint, data.records, data.world, cfg.eval.k);
      row.ok = true;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    if (progress) *progress << name << ": " << (row.ok ? "done" : "failed: " + row.error) << '\n';
    table.rows.push_back(std::move(row));
  };
  run("base", base);
  for (const Variant& v : variants) {
    ExperimentConfig cfg;
    try {
      cfg = apply_variant(base, v);
    } catch (const std::exception& e) {
      table.rows.push_back({v.name, false, e.what(), {}});
      continue;
    }
    run(v.name, cfg);
  }
  return table;
}

}  // namespace moppr
