#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "moppr/config.hpp"
#include "moppr/pipeline.hpp"
#include "moppr/samples.hpp"
#include "moppr/world_io.hpp"

namespace fs = std::filesystem;
using namespace moppr;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "global seed");
  cmd->add_option("--out", c.out, "experiment output directory");
}

ExperimentConfig load_config(const Common& c) {
  ExperimentConfig cfg = c.config_path.empty() ? ExperimentConfig{} : load_experiment_config(c.config_path);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  cfg.resolve();
  return cfg;
}

std::vector<ObjectiveId> split_objectives(const std::string& list) {
  std::vector<ObjectiveId> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(parse_objective(item));
  return out;
}

int exit_code(const Error& e) {
  if (dynamic_cast<const InvalidConfig*>(&e)) return 2;
  if (dynamic_cast<const NotFound*>(&e)) return 3;
  if (dynamic_cast<const IoError*>(&e)) return 4;
  if (dynamic_cast<const DataIntegrity*>(&e)) return 5;
  if (dynamic_cast<const NumericError*>(&e)) return 6;
  return 1;
}

const char* error_kind(const Error& e) {
  if (dynamic_cast<const InvalidConfig*>(&e)) return "invalid-config";
  if (dynamic_cast<const NotFound*>(&e)) return "not-found";
  if (dynamic_cast<const IoError*>(&e)) return "io";
  if (dynamic_cast<const DataIntegrity*>(&e)) return "data-integrity";
  if (dynamic_cast<const NumericError*>(&e)) return "numeric";
  if (dynamic_cast<const BatchSizeError*>(&e)) return "batch-size";
  if (dynamic_cast<const InvalidInput*>(&e)) return "invalid-input";
  return "error";
}

fs::path default_checkpoint(const ExperimentConfig& cfg) { return final_checkpoint_path(fs::path(cfg.out_dir) / "train"); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-objective personalized product retrieval: data, training, evaluation, serving"};
  app.require_subcommand(1);

  // gen
  Common gen_c;
  auto* gen = app.add_subcommand("gen", "generate the world, page-view logs and evaluation records");
  add_common(gen, gen_c);

  // train
  Common train_c;
  std::optional<std::int64_t> steps;
  std::string disable;
  bool no_nci = false, no_ui = false;
  std::string resume;
  auto* train_cmd = app.add_subcommand("train", "train the two-tower model");
  add_common(train_cmd, train_c);
  train_cmd->add_option("--steps", steps, "number of update steps")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--disable", disable, "objectives to disable: relevance,exposure,click,purchase");
  train_cmd->add_flag("--no-nci", no_nci, "drop non-clicked impressions from samples");
  train_cmd->add_flag("--no-ui", no_ui, "drop under-impressions from samples");
  train_cmd->add_option("--resume", resume, "continue from this checkpoint")->check(CLI::ExistingFile);

  // eval
  Common eval_c;
  std::string eval_ckpt;
  std::optional<int> eval_k;
  auto* eval_cmd = app.add_subcommand("eval", "offline metrics of a checkpoint");
  add_common(eval_cmd, eval_c);
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint (default: <out>/train/model.ckpt)");
  eval_cmd->add_option("--k", eval_k, "cutoff K (default max(50, 5% of catalog))");

  // index and retrieve share the index flags
  struct IndexFlags {
    std::string ckpt;
    bool quantize = false, gmv = false;
    std::optional<double> sigma;
    std::optional<int> branching, max_leaf;
  };
  auto add_index_flags = [](CLI::App* cmd, IndexFlags& f) {
    cmd->add_option("--checkpoint", f.ckpt, "checkpoint (default: <out>/train/model.ckpt)");
    cmd->add_flag("--quantize", f.quantize, "store item vectors as INT8");
    cmd->add_flag("--gmv", f.gmv, "GMV-maximizing augmentation with ln(price)");
    cmd->add_option("--sigma", f.sigma, "inner-product scale of the GMV mode");
    cmd->add_option("--branching", f.branching, "cluster tree branching factor");
    cmd->add_option("--max-leaf", f.max_leaf, "cluster tree leaf capacity");
  };
  auto index_config = [](const ExperimentConfig& cfg, const IndexFlags& f) {
    if (f.sigma && !f.gmv) throw InvalidConfig("--sigma only applies together with --gmv");
    IndexConfig ic = cfg.index;
    ic.quantize = ic.quantize || f.quantize;
    ic.gmv = ic.gmv || f.gmv;
    if (f.sigma) ic.sigma = *f.sigma;
    if (f.branching) ic.branching = *f.branching;
    if (f.max_leaf) ic.max_leaf = *f.max_leaf;
    ic.validate();
    return ic;
  };

  Common index_c;
  IndexFlags index_f;
  auto* index_cmd = app.add_subcommand("index", "build the serving index from a checkpoint");
  add_common(index_cmd, index_c);
  add_index_flags(index_cmd, index_f);

  Common ret_c;
  IndexFlags ret_f;
  int ret_user = 0, ret_query = 0;
  double ret_ts = 0.0;
  std::optional<int> ret_k, ret_beam;
  bool exact = false, ann = false;
  std::string ret_index;
  auto* ret_cmd = app.add_subcommand("retrieve", "top-K items for one user and query");
  add_common(ret_cmd, ret_c);
  add_index_flags(ret_cmd, ret_f);
  ret_cmd->add_option("--user", ret_user, "user id")->required();
  ret_cmd->add_option("--query", ret_query, "query id")->required();
  ret_cmd->add_option("--ts", ret_ts, "request time within the simulated day");
  ret_cmd->add_option("--k", ret_k, "number of items (default 10)");
  ret_cmd->add_option("--beam", ret_beam, "beam width of the tree search");
  auto* exact_flag = ret_cmd->add_flag("--exact", exact, "exhaustive inner-product search");
  auto* ann_flag = ret_cmd->add_flag("--ann", ann, "cluster tree beam search");
  exact_flag->excludes(ann_flag);
  ret_cmd->add_option("--index", ret_index, "prebuilt index file (default: build in memory)");

  Common abl_c;
  std::string variants_path;
  std::string builtin = "components";
  std::vector<int> sweep;
  std::optional<std::int64_t> abl_steps;
  auto* abl_cmd = app.add_subcommand("ablate", "train and evaluate configuration variants");
  add_common(abl_cmd, abl_c);
  abl_cmd->add_option("--variants", variants_path, "JSON array of {name, patch} variants")->check(CLI::ExistingFile);
  abl_cmd->add_option("--builtin", builtin, "built-in variant set when no file is given: components, sweep, baseline, none")
      ->check(CLI::IsMember({"components", "sweep", "baseline", "none"}));
  abl_cmd->add_option("--sweep", sweep, "total shared negatives L for the sweep")->delimiter(',');
  abl_cmd->add_option("--steps", abl_steps, "training steps per variant")->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) {
      const ExperimentConfig cfg = load_config(gen_c);
      const fs::path out = cfg.out_dir;
      const Dataset data = generate_dataset(cfg);
      write_dataset(data, cfg, out);
      echo_config(cfg, out);
      std::cout << "world: " << data.world.items.size() << " items, " << data.world.users.size() << " users, "
                << data.world.queries.size() << " queries\n"
                << "train pages: " << data.train_pages.size() << " of " << data.train_requested << " requested ("
                << data.train_skipped_empty << " empty skipped)\n"
                << "held-out pages: " << data.heldout_pages.size() << ", eval records: " << data.records.size()
                << "\nwritten to " << out.string() << '\n';
      return 0;
    }
    if (*train_cmd) {
      ExperimentConfig cfg = load_config(train_c);
      if (steps) cfg.train.steps = *steps;
      if (!disable.empty()) {
        for (ObjectiveId o : split_objectives(disable))
          std::erase(cfg.train.enabled_objectives, o);
      }
      if (no_nci) cfg.samples.drop_non_clicked_impressions = true;
      if (no_ui) cfg.samples.drop_under_impressions = true;
      cfg.resolve();
      const fs::path out = fs::path(cfg.out_dir) / "train";
      const Dataset data = load_dataset(cfg.out_dir);
      echo_config(cfg, out);
      TrainOptions opt;
      opt.out_dir = out;
      opt.progress = &std::cout;
      if (!resume.empty()) opt.resume = load_checkpoint(resume);
      const TrainResult r = train_experiment(data, cfg, opt);
      std::cout << "trained to step " << r.checkpoint.step << "; checkpoint " << final_checkpoint_path(out).string()
                << '\n';
      return 0;
    }
    if (*eval_cmd) {
      ExperimentConfig cfg = load_config(eval_c);
      if (eval_k) cfg.eval.k = *eval_k;
      const Dataset data = load_dataset(cfg.out_dir);
      const Checkpoint ckpt = load_checkpoint(eval_ckpt.empty() ? default_checkpoint(cfg) : fs::path(eval_ckpt));
      const MetricsReport rep = evaluate(ckpt, data.records, data.world, cfg.eval.k);
      const fs::path out = fs::path(cfg.out_dir) / "eval";
      echo_config(cfg, out);
      write_text_file(out / "report.json", report_to_json(rep).dump(2) + "\n");
      write_text_file(out / "report.csv", report_csv(rep));
      std::cout << report_to_json(rep).dump(2) << '\n';
      return 0;
    }
    if (*index_cmd) {
      const ExperimentConfig cfg = load_config(index_c);
      const IndexConfig ic = index_config(cfg, index_f);
      const Dataset data = load_dataset(cfg.out_dir);
      const Checkpoint ckpt =
          load_checkpoint(index_f.ckpt.empty() ? default_checkpoint(cfg) : fs::path(index_f.ckpt));
      const EmbeddingIndex index = build_item_index(ckpt, data.world, ic);
      const fs::path out = fs::path(cfg.out_dir) / "index";
      echo_config(cfg, out);
      index.save(out / "index.bin");
      std::cout << "indexed " << index.size() << " items (dim " << index.dim() << ", "
                << (index.quantized() ? "int8" : "float32") << ", "
                << (index.mode() == IndexMode::GmvAugmented ? "gmv" : "plain") << ") -> "
                << (out / "index.bin").string() << '\n';
      return 0;
    }
    if (*ret_cmd) {
      ExperimentConfig cfg = load_config(ret_c);
      if (exact && ret_beam) throw InvalidConfig("--beam only applies to --ann");
      const bool use_ann = ann || (!exact && ret_beam.has_value());
      const Dataset data = load_dataset(cfg.out_dir);
      const Checkpoint ckpt = load_checkpoint(ret_f.ckpt.empty() ? default_checkpoint(cfg) : fs::path(ret_f.ckpt));
      EmbeddingIndex index;
      if (!ret_index.empty()) {
        if (ret_f.quantize || ret_f.gmv || ret_f.branching || ret_f.max_leaf)
          throw InvalidConfig("index build flags cannot be combined with --index");
        index = EmbeddingIndex::load(ret_index);
      } else {
        IndexConfig ic = index_config(cfg, ret_f);
        ic.build_tree = use_ann;
        index = build_item_index(ckpt, data.world, ic);
      }
      const EvalRecord req{ret_user, ret_query, ret_ts, {0}, RecordSource::SearchClick};
      const Mat<float> uq = embed_records(ckpt, data.world, std::span<const EvalRecord>(&req, 1));
      std::vector<float> q(uq.data(), uq.data() + uq.cols());
      if (index.mode() == IndexMode::GmvAugmented) {
        const double sigma = ret_f.sigma ? *ret_f.sigma : cfg.index.sigma;
        q = augment_query(q, sigma);
      }
      const int k = ret_k ? *ret_k : 10;
      const int beam = ret_beam ? *ret_beam : cfg.index.beam;
      const std::vector<ScoredItem> hits = use_ann ? search_ann(index, q, k, beam) : search_exact(index, q, k);
      std::ostringstream table;
      table.precision(9);
      table << "rank,item_id,score,price,relevant\n";
      for (std::size_t r = 0; r < hits.size(); ++r) {
        const CatalogItem& it = data.world.item(hits[r].id);
        table << r + 1 << ',' << hits[r].id << ',' << hits[r].score << ',' << it.price << ','
              << (relevance_oracle(data.world, ret_query, hits[r].id) ? 1 : 0) << '\n';
      }
      const fs::path out = fs::path(cfg.out_dir) / "retrieve";
      echo_config(cfg, out);
      write_text_file(out / "results.csv", table.str());
      std::cout << table.str();
      return 0;
    }
    if (*abl_cmd) {
      ExperimentConfig cfg = load_config(abl_c);
      if (abl_steps) cfg.train.steps = *abl_steps;
      cfg.resolve();
      std::vector<Variant> variants;
      if (!variants_path.empty()) {
        nlohmann::json doc;
        try {
          doc = nlohmann::json::parse(read_text_file(variants_path));
        } catch (const nlohmann::json::parse_error& e) {
          throw InvalidConfig("cannot parse " + variants_path + ": " + e.what());
        }
        variants = parse_variants(doc);
      } else if (builtin == "components") {
        variants = component_ablation_variants();
      } else if (builtin == "sweep") {
        variants = negative_sweep_variants(sweep.empty() ? std::vector<int>{64, 256, 1024, 4096} : sweep,
                                           cfg.train.batch_size_B);
      } else if (builtin == "baseline") {
        variants = {single_positive_baseline()};
      }
      const Dataset data = load_dataset(cfg.out_dir);
      const fs::path out = fs::path(cfg.out_dir) / "ablate";
      echo_config(cfg, out);
      const AblationTable table = ablation_run(data, cfg, variants, &std::cerr);
      write_text_file(out / "ablation.csv", table.csv());
      write_text_file(out / "ablation.txt", table.text());
      std::cout << table.text();
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << error_kind(e) << ": " << e.what() << '\n';
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
