#include "moppr/config.hpp"

#include "moppr/world_io.hpp"

// Like NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT, but without `inline`
// so the declarations in the header stay valid.
#define MOPPR_JSON_FIELDS(Type, ...)                                                                 \
  void to_json(nlohmann::json& nlohmann_json_j, const Type& nlohmann_json_t) {                      \
    NLOHMANN_JSON_EXPAND(NLOHMANN_JSON_PASTE(NLOHMANN_JSON_TO, __VA_ARGS__))                        \
  }                                                                                                 \
  void from_json(const nlohmann::json& nlohmann_json_j, Type& nlohmann_json_t) {                    \
    const Type nlohmann_json_default_obj{};                                                         \
    NLOHMANN_JSON_EXPAND(NLOHMANN_JSON_PASTE(NLOHMANN_JSON_FROM_WITH_DEFAULT, __VA_ARGS__))         \
  }

namespace moppr {

namespace {

// Enums travel as names; anything else is a config error rather than a
// silent fallback to the first value.
template <class E, std::size_t N>
void enum_to_json(nlohmann::json& j, E value, const std::pair<E, const char*> (&names)[N]) {
  for (const auto& [e, name] : names)
    if (e == value) {
      j = name;
      return;
    }
  throw InvalidConfig("unnamed enum value");
}

template <class E, std::size_t N>
void enum_from_json(const nlohmann::json& j, E& value, const std::pair<E, const char*> (&names)[N]) {
  if (j.is_string())
    for (const auto& [e, name] : names)
      if (j.get<std::string>() == name) {
        value = e;
        return;
      }
  throw InvalidConfig("unknown enum value " + j.dump());
}

constexpr std::pair<SampleMode, const char*> kSampleModes[] = {
    {SampleMode::MultiPositive, "multi_positive"}, {SampleMode::SinglePositiveClick, "single_positive_click"}};
constexpr std::pair<WeightMode, const char*> kWeightModes[] = {
    {WeightMode::Fixed, "fixed"}, {WeightMode::InversePositiveCount, "inverse_positive_count"}};

}  // namespace

void to_json(nlohmann::json& j, const SampleMode& m) { enum_to_json(j, m, kSampleModes); }
void from_json(const nlohmann::json& j, SampleMode& m) { enum_from_json(j, m, kSampleModes); }
void to_json(nlohmann::json& j, const WeightMode& m) { enum_to_json(j, m, kWeightModes); }
void from_json(const nlohmann::json& j, WeightMode& m) { enum_from_json(j, m, kWeightModes); }

MOPPR_JSON_FIELDS(
    WorldConfig, num_users, num_queries, num_items, num_categories, num_super_categories, latent_dim, vocab_size,
    num_brands, num_sellers, page_size_N, underimpression_pool, underimpression_skip, logged_underimpressions,
    click_scale, click_bias, purchase_scale, purchase_bias, price_sensitivity, behavior_history_len,
    relevance_threshold, ranker_noise, irrelevant_exposure_rate, max_query_terms, title_len, category_noise,
    item_noise, query_noise, seed)

MOPPR_JSON_FIELDS(SampleConfig, n_impressions, m_underimpressions, rand_neg_per_sample,
                                                batch_size_B, min_clicks_filter, online_hard_mining,
                                                extra_hard_negatives, drop_non_clicked_impressions,
                                                drop_under_impressions, mode)

MOPPR_JSON_FIELDS(ModelConfig, d, uq_hidden, item_hidden, out_dim, leaky_slope, tau,
                                                layer_norm_eps, stats_scale)

MOPPR_JSON_FIELDS(EvalConfig, k, heldout_pages, click_records, purchase_records,
                                                offsite_records)

MOPPR_JSON_FIELDS(IndexConfig, quantize, gmv, sigma, build_tree, branching, max_leaf,
                                                beam, seed)

MOPPR_JSON_FIELDS(FeatureSpace, num_users, num_queries, num_items, num_categories,
                                                num_brands, num_sellers, vocab_size)

void to_json(nlohmann::json& j, const TrainConfig& c) {
  std::vector<std::string> enabled;
  for (ObjectiveId o : kAllObjectives)
    if (c.enabled(o)) enabled.emplace_back(objective_name(o));
  j = {{"learning_rate", c.learning_rate},
       {"adagrad_epsilon", c.adagrad_epsilon},
       {"batch_size_B", c.batch_size_B},
       {"steps", c.steps},
       {"seed", c.seed},
       {"checkpoint_every", c.checkpoint_every},
       {"enabled_objectives", enabled},
       {"weight_mode", c.weight_mode},
       {"sample_level_weights", c.sample_level_weights},
       {"prefetch_depth", c.prefetch_depth},
       {"hard_pool_size", c.hard_pool_size}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.adagrad_epsilon = j.value("adagrad_epsilon", d.adagrad_epsilon);
  c.batch_size_B = j.value("batch_size_B", d.batch_size_B);
  c.steps = j.value("steps", d.steps);
  c.seed = j.value("seed", d.seed);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.weight_mode = j.value("weight_mode", d.weight_mode);
  c.sample_level_weights = j.value("sample_level_weights", d.sample_level_weights);
  c.prefetch_depth = j.value("prefetch_depth", d.prefetch_depth);
  c.hard_pool_size = j.value("hard_pool_size", d.hard_pool_size);
  c.enabled_objectives = d.enabled_objectives;
  if (j.contains("enabled_objectives")) {
    c.enabled_objectives.clear();
    for (const auto& name : j.at("enabled_objectives")) {
      const ObjectiveId o = parse_objective(name.get<std::string>());
      if (!c.enabled(o)) c.enabled_objectives.push_back(o);
    }
  }
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"world", c.world}, {"samples", c.samples}, {"model", c.model},       {"train", c.train},
       {"eval", c.eval},   {"index", c.index},     {"train_pages", c.train_pages}, {"seed", c.seed},
       {"out_dir", c.out_dir}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  const ExperimentConfig d;
  c.world = j.value("world", d.world);
  c.samples = j.value("samples", d.samples);
  c.model = j.value("model", d.model);
  c.train = j.value("train", d.train);
  c.eval = j.value("eval", d.eval);
  c.index = j.value("index", d.index);
  c.train_pages = j.value("train_pages", d.train_pages);
  c.seed = j.value("seed", d.seed);
  c.out_dir = j.value("out_dir", d.out_dir);
}

void ExperimentConfig::resolve() {
  world.seed = seed;
  train.seed = seed;
  index.seed = seed;
  samples.batch_size_B = train.batch_size_B;
  validate();
}

void ExperimentConfig::validate() const {
  world.validate();
  samples.validate();
  model.validate();
  train.validate();
  eval.validate();
  index.validate();
  if (train_pages < 0) throw InvalidConfig("train_pages must be >= 0");
  if (samples.n_impressions > world.page_size_N)
    throw InvalidConfig("samples.n_impressions exceeds world.page_size_N");
}

namespace {

void check_known_keys(const nlohmann::json& given, const nlohmann::json& known, const std::string& where) {
  if (!given.is_object()) return;
  if (!known.is_object()) throw InvalidConfig("config field " + where + " must not be an object");
  for (const auto& [key, value] : given.items()) {
    if (!known.contains(key)) throw InvalidConfig("unknown config field " + where + key);
    if (value.is_object()) check_known_keys(value, known.at(key), where + key + ".");
  }
}

}  // namespace

ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  if (!j.is_object()) throw InvalidConfig("config document must be a JSON object");
  check_known_keys(j, nlohmann::json(ExperimentConfig{}), "");
  try {
    return j.get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfig(std::string("malformed config: ") + e.what());
  }
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidConfig("cannot parse " + path.string() + ": " + e.what());
  }
  return parse_experiment_config(j);
}

}  // namespace moppr
