#include "moppr/step.hpp"

#include <unordered_map>

namespace moppr {

BatchInputs resolve_batch(const Batch& batch, const World& world) {
  BatchInputs in;
  const std::size_t B = batch.samples.size();
  std::unordered_map<ItemId, int> row_of;
  auto row = [&](ItemId id) {
    auto [it, inserted] = row_of.try_emplace(id, static_cast<int>(in.items.size()));
    if (inserted) in.items.push_back(item_features(world, id));
    return it->second;
  };

  in.user_query.reserve(B);
  in.own_item.resize(B);
  in.own_mask.resize(B);
  in.own_labels.resize(B);
  in.online_item.resize(B);
  for (std::size_t s = 0; s < B; ++s) {
    const TrainingSample& ts = batch.samples[s];
    in.user_query.push_back(user_query_features(world, ts.user, ts.query));
    auto take = [&](int k) {
      const ItemId id = ts.item_slots[static_cast<std::size_t>(k)];
      const bool live = ts.mask[static_cast<std::size_t>(k)] != 0 && id != kPadItem;
      in.own_item[s].push_back(live ? row(id) : -1);
      in.own_mask[s].push_back(live ? 1 : 0);
      for (int o = 0; o < kNumObjectives; ++o)
        in.own_labels[s][o].push_back(live ? ts.labels.values[o][static_cast<std::size_t>(k)] : 0);
    };
    for (int k = 0; k < ts.own_slot_count(); ++k) take(k);
    for (int k = ts.hard_begin(); k < ts.hard_begin() + ts.n_hard_slots; ++k) take(k);
  }
  for (ItemId id : batch.shared_negatives) in.shared_item.push_back(row(id));
  in.shared_mask = batch.shared_mask;
  if (in.shared_mask.size() != B) in.shared_mask.assign(B, std::vector<std::uint8_t>(in.shared_item.size(), 1));
  for (std::size_t s = 0; s < batch.online_negatives.size() && s < B; ++s)
    for (ItemId id : batch.online_negatives[s]) in.online_item[s].push_back(row(id));
  return in;
}

template <class T>
BatchLoss batch_loss(const TwoTowerModel<T>& model, const Parameters<T>& params, const BatchInputs& in,
                     const LossWeights& weights, Parameters<T>* grads) {
  const std::size_t B = in.num_samples();
  const double tau = model.config().tau;
  UserQueryTape<T> uq_tape;
  ItemTape<T> item_tape;
  const Mat<T> U = model.user_query_forward(params, in.user_query, grads ? &uq_tape : nullptr);
  const Mat<T> V = model.item_forward(params, in.items, grads ? &item_tape : nullptr);
  const Mat<double> Ud = U.template cast<double>();
  const Mat<double> Vd = V.template cast<double>();

  BatchLoss out;
  out.scores.resize(B);
  std::vector<SampleObjective> objectives(B);
  std::vector<std::vector<int>> rows(B);
  std::array<long, kNumObjectives> positives{};
  std::array<double, kNumObjectives> losses{};

  for (std::size_t s = 0; s < B; ++s) {
    const std::size_t n = in.candidate_count(s);
    std::vector<int>& r = rows[s];
    std::vector<std::uint8_t> mask;
    r.reserve(n);
    mask.reserve(n);
    std::array<std::vector<std::uint8_t>, kNumObjectives> labels;
    for (std::size_t k = 0; k < in.own_item[s].size(); ++k) {
      r.push_back(in.own_item[s][k]);
      mask.push_back(in.own_mask[s][k]);
    }
    for (std::size_t k = 0; k < in.shared_item.size(); ++k) {
      r.push_back(in.shared_item[k]);
      mask.push_back(in.shared_mask[s][k]);
    }
    for (int id : in.online_item[s]) {
      r.push_back(id);
      mask.push_back(1);
    }
    for (int o = 0; o < kNumObjectives; ++o) {
      labels[o] = in.own_labels[s][o];
      labels[o].resize(n, 0);
    }
    std::vector<double>& z = out.scores[s];
    z.assign(n, 0.0);
    for (std::size_t k = 0; k < n; ++k)
      if (mask[k]) z[k] = Ud.row(static_cast<Eigen::Index>(s)).dot(Vd.row(r[k]));
    std::array<std::span<const std::uint8_t>, kNumObjectives> label_spans;
    for (int o = 0; o < kNumObjectives; ++o) label_spans[o] = labels[o];
    objectives[s] = evaluate_sample(z, tau, mask, label_spans);
    for (int o = 0; o < kNumObjectives; ++o) {
      positives[o] += objectives[s].positives[o];
      losses[o] += objectives[s].loss[o];
    }
    out.breakdown.clamped_logs += objectives[s].clamped_logs;
  }

  const bool per_sample = weights.mode == WeightMode::InversePositiveCount && weights.sample_level;
  std::vector<std::array<double, kNumObjectives>> w(B);
  if (per_sample) {
    LossBreakdown& b = out.breakdown;
    b.loss = losses;
    b.positives = positives;
    for (std::size_t s = 0; s < B; ++s) {
      const LossBreakdown sb = total_loss(objectives[s].loss, objectives[s].positives, weights);
      w[s] = sb.weight;
      for (int o = 0; o < kNumObjectives; ++o) {
        b.weighted[o] += sb.weighted[o];
        b.weight[o] += sb.weight[o] / static_cast<double>(B);
      }
      b.total += sb.total;
    }
  } else {
    const long clamped = out.breakdown.clamped_logs;
    out.breakdown = total_loss(losses, positives, weights);
    out.breakdown.clamped_logs = clamped;
    w.assign(B, out.breakdown.weight);
  }

  if (!grads) return out;

  Mat<T> dU = Mat<T>::Zero(U.rows(), U.cols());
  Mat<double> dV = Mat<double>::Zero(V.rows(), V.cols());
  for (std::size_t s = 0; s < B; ++s) {
    const std::vector<double> g = objectives[s].gradient(w[s], tau);
    RowVec<double> du = RowVec<double>::Zero(U.cols());
    const auto us = Ud.row(static_cast<Eigen::Index>(s));
    for (std::size_t k = 0; k < g.size(); ++k) {
      if (g[k] == 0.0) continue;
      du += g[k] * Vd.row(rows[s][k]);
      dV.row(rows[s][k]) += g[k] * us;
    }
    dU.row(static_cast<Eigen::Index>(s)) = du.template cast<T>();
  }
  model.user_query_backward(params, uq_tape, dU, *grads);
  model.item_backward(params, item_tape, dV.template cast<T>(), *grads);
  return out;
}

template BatchLoss batch_loss<float>(const TwoTowerModel<float>&, const Parameters<float>&, const BatchInputs&,
                                     const LossWeights&, Parameters<float>*);
template BatchLoss batch_loss<double>(const TwoTowerModel<double>&, const Parameters<double>&, const BatchInputs&,
                                      const LossWeights&, Parameters<double>*);

}  // namespace moppr
