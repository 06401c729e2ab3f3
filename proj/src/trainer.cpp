#include "moppr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include "moppr/queue.hpp"
#include "moppr/rng.hpp"

namespace moppr {

namespace {

constexpr std::uint64_t kStreamOrder = 0x6f72646572ULL;
constexpr std::uint64_t kStreamSample = 0x73616d706c65ULL;

}  // namespace

bool TrainConfig::enabled(ObjectiveId o) const {
  return std::find(enabled_objectives.begin(), enabled_objectives.end(), o) != enabled_objectives.end();
}

LossWeights TrainConfig::loss_weights() const {
  LossWeights w;
  for (ObjectiveId o : kAllObjectives) w[o] = enabled(o) ? 1.0 : 0.0;
  w.mode = weight_mode;
  w.sample_level = sample_level_weights;
  return w;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw InvalidConfig("train config: learning_rate must be > 0");
  if (!(adagrad_epsilon >= 0.0)) throw InvalidConfig("train config: adagrad_epsilon must be >= 0");
  if (batch_size_B < 1) throw InvalidConfig("train config: batch_size_B must be >= 1");
  if (steps < 0) throw InvalidConfig("train config: steps must be >= 0");
  if (checkpoint_every < 0) throw InvalidConfig("train config: checkpoint_every must be >= 0");
  if (enabled_objectives.empty()) throw InvalidConfig("train config: at least one objective must be enabled");
  if (prefetch_depth < 1) throw InvalidConfig("train config: prefetch_depth must be >= 1");
  if (hard_pool_size < 0) throw InvalidConfig("train config: hard_pool_size must be >= 0");
}

void adagrad_step(Parameters<float>& params, const Parameters<float>& grads, Parameters<float>& acc, double lr,
                  double eps, const ParameterLayout* layout) {
  if (grads.size() != params.size() || acc.size() != params.size())
    throw InvalidInput("adagrad: parameter, gradient and accumulator counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const int idx = static_cast<int>(i);
    if (grads[idx].rows() != params[idx].rows() || grads[idx].cols() != params[idx].cols() ||
        acc[idx].rows() != params[idx].rows() || acc[idx].cols() != params[idx].cols())
      throw InvalidInput("adagrad: shape mismatch in tensor " + std::to_string(i));
    if (!grads[idx].allFinite()) {
      const std::string name = layout ? layout->names[i] : "#" + std::to_string(i);
      throw NumericError("non-finite gradient in parameter " + name);
    }
  }
  const float lr_f = static_cast<float>(lr);
  const float eps_f = static_cast<float>(eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const int idx = static_cast<int>(i);
    float* p = params[idx].data();
    const float* g = grads[idx].data();
    float* a = acc[idx].data();
    const Eigen::Index n = params[idx].size();
    for (Eigen::Index k = 0; k < n; ++k) {
      if (g[k] == 0.0f) continue;
      a[k] += g[k] * g[k];
      p[k] -= lr_f * g[k] / (std::sqrt(a[k]) + eps_f);
    }
  }
}

BatchSource::BatchSource(const World& world, std::span<const PageView> pages, SampleConfig config, std::uint64_t seed,
                         int hard_pool_size)
    : world_(&world), pages_(pages), config_(std::move(config)), seed_(seed) {
  config_.validate();
  for (std::size_t p = 0; p < pages_.size(); ++p) {
    const int clicks = pages_[p].clicks();
    if (clicks < config_.min_clicks_filter) continue;
    if (config_.mode == SampleMode::MultiPositive) {
      units_.emplace_back(p, 0);
    } else {
      for (int k = 0; k < clicks; ++k) units_.emplace_back(p, k);
    }
  }
  if (units_.empty()) throw InvalidInput("no page view passes the click filter; nothing to train on");
  if (config_.extra_hard_negatives > 0 && hard_pool_size > 0)
    hard_pool_ = build_hard_negative_pool(pages_, world, hard_pool_size);
}

std::vector<std::size_t> BatchSource::epoch_order(std::int64_t epoch) const {
  std::vector<std::size_t> order(units_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng = make_rng(seed_, {kStreamOrder, static_cast<std::uint64_t>(epoch)});
  shuffle(order.begin(), order.end(), rng);
  return order;
}

Batch BatchSource::batch(std::int64_t step) const {
  const auto B = static_cast<std::int64_t>(config_.batch_size_B);
  const auto n = static_cast<std::int64_t>(units_.size());
  std::vector<TrainingSample> samples;
  samples.reserve(static_cast<std::size_t>(B));
  std::int64_t cached_epoch = -1;
  std::vector<std::size_t> order;
  for (std::int64_t b = 0; b < B; ++b) {
    const std::int64_t pos = step * B + b;
    const std::int64_t epoch = pos / n;
    if (epoch != cached_epoch) {
      order = epoch_order(epoch);
      cached_epoch = epoch;
    }
    const auto [page, ordinal] = units_[order[static_cast<std::size_t>(pos % n)]];
    Rng rng = make_rng(seed_, {kStreamSample, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(b)});
    const PageView& pv = pages_[page];
    if (config_.mode == SampleMode::MultiPositive) {
      auto s = build_sample(pv, *world_, config_, rng, hard_pool_.empty() ? nullptr : &hard_pool_);
      samples.push_back(std::move(*s));
    } else {
      auto all = build_single_positive_samples(pv, *world_, config_, rng);
      samples.push_back(std::move(all.at(static_cast<std::size_t>(ordinal))));
    }
  }
  return extend_online_hard(assemble_batch(std::move(samples), config_), config_);
}

nlohmann::json step_log_to_json(const StepLog& log) {
  nlohmann::json j;
  j["step"] = log.step;
  j["total_loss"] = log.loss.total;
  nlohmann::json per = nlohmann::json::object();
  for (ObjectiveId o : kAllObjectives) {
    const int k = static_cast<int>(o);
    per[objective_name(o)] = {{"loss", log.loss.loss[k]},
                              {"weight", log.loss.weight[k]},
                              {"weighted", log.loss.weighted[k]},
                              {"positives", log.loss.positives[k]}};
  }
  j["objectives"] = per;
  j["grad_norm"] = log.grad_norm;
  j["clamped_logs"] = log.loss.clamped_logs;
  return j;
}

std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, std::int64_t step) {
  std::ostringstream name;
  name << "step_" << std::setw(8) << std::setfill('0') << step << ".ckpt";
  return out_dir / "checkpoints" / name.str();
}

std::filesystem::path final_checkpoint_path(const std::filesystem::path& out_dir) { return out_dir / "model.ckpt"; }

TrainResult train(const World& world, std::span<const PageView> pages, const ModelConfig& model_config,
                  const SampleConfig& sample_config, const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  model_config.validate();
  SampleConfig sc = sample_config;
  sc.batch_size_B = config.batch_size_B;
  const FeatureSpace space = FeatureSpace::from_world(world.config);
  const TwoTowerModel<float> model(model_config, space);

  TrainResult result;
  Checkpoint& ckpt = result.checkpoint;
  if (options.resume) {
    ckpt = *options.resume;
    if (!(ckpt.space == space)) throw InvalidInput("resume checkpoint was trained on a different feature space");
    if (ckpt.params.size() != model.layout().size())
      throw InvalidInput("resume checkpoint does not match the model layout");
    if (!ckpt.accumulators) throw InvalidInput("resume checkpoint carries no optimizer state");
    if (ckpt.step > config.steps) throw InvalidInput("resume checkpoint is past the requested step count");
  } else {
    ckpt.config = model_config;
    ckpt.space = space;
    ckpt.step = 0;
    ckpt.seed = config.seed;
    ckpt.params = model.init_parameters(config.seed);
    ckpt.accumulators = model.zero_parameters();
  }

  const bool write = !options.out_dir.empty();
  std::ofstream log_file;
  if (write) {
    std::filesystem::create_directories(options.out_dir / "checkpoints");
    log_file.open(options.out_dir / "train_log.jsonl", options.resume ? std::ios::app : std::ios::trunc);
    if (!log_file) throw IoError("cannot open step log in " + options.out_dir.string());
    if (!options.resume) save_checkpoint(ckpt, checkpoint_path(options.out_dir, 0));
  }

  if (ckpt.step < config.steps) {
    const BatchSource source(world, pages, sc, config.seed, config.hard_pool_size);
    const LossWeights weights = config.loss_weights();
    const std::int64_t first = ckpt.step;
    const std::int64_t last = config.steps;

    // Batch preparation runs one thread ahead of the update step.
    BoundedQueue<BatchInputs> queue(static_cast<std::size_t>(config.prefetch_depth));
    std::exception_ptr producer_error;
    std::thread producer([&] {
      try {
        for (std::int64_t s = first; s < last; ++s)
          if (!queue.push(source.inputs(s))) return;
      } catch (...) {
        producer_error = std::current_exception();
      }
      queue.close();
    });
    struct Joiner {
      BoundedQueue<BatchInputs>& q;
      std::thread& t;
      ~Joiner() {
        q.close();
        if (t.joinable()) t.join();
      }
    } joiner{queue, producer};

    Parameters<float> grads = model.zero_parameters();
    for (std::int64_t s = first; s < last; ++s) {
      std::optional<BatchInputs> inputs = queue.pop();
      if (!inputs) {
        queue.close();
        producer.join();
        if (producer_error) std::rethrow_exception(producer_error);
        throw Error("batch producer stopped early");
      }
      grads.set_zero();
      const BatchLoss bl = batch_loss(model, ckpt.params, *inputs, weights, &grads);
      if (!std::isfinite(bl.breakdown.total))
        throw NumericError("non-finite loss at step " + std::to_string(s + 1));
      double sq = 0.0;
      for (std::size_t i = 0; i < grads.size(); ++i)
        sq += grads[static_cast<int>(i)].template cast<double>().squaredNorm();
      adagrad_step(ckpt.params, grads, *ckpt.accumulators, config.learning_rate, config.adagrad_epsilon,
                   &model.layout());
      ckpt.step = s + 1;

      StepLog entry{ckpt.step, bl.breakdown, std::sqrt(sq)};
      if (write) log_file << step_log_to_json(entry).dump() << '\n';
      if (options.progress && options.progress_every > 0 && ckpt.step % options.progress_every == 0)
        *options.progress << "step " << ckpt.step << " loss " << entry.loss.total << " grad_norm " << entry.grad_norm
                          << '\n';
      result.logs.push_back(std::move(entry));
      if (write && config.checkpoint_every > 0 && ckpt.step % config.checkpoint_every == 0)
        save_checkpoint(ckpt, checkpoint_path(options.out_dir, ckpt.step));
    }
  }
  if (write) {
    log_file.flush();
    save_checkpoint(ckpt, final_checkpoint_path(options.out_dir));
  }
  return result;
}

}  // namespace moppr
