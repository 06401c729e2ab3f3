#include "moppr/objective.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace moppr {

namespace {

void check_inputs(std::span<const double> scores, double tau, std::span<const std::uint8_t> mask) {
  if (!(tau > 0.0)) throw InvalidInput("softmax temperature must be > 0");
  if (mask.size() != scores.size()) throw InvalidInput("mask length differs from score length");
  if (std::none_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }))
    throw InvalidInput("softmax over an all-masked candidate list");
}

/// log-softmax over unmasked slots; masked slots get -inf.
std::vector<double> log_softmax(std::span<const double> scores, double tau, std::span<const std::uint8_t> mask) {
  check_inputs(scores, tau, mask);
  const double neg_inf = -std::numeric_limits<double>::infinity();
  double top = neg_inf;
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (mask[j]) top = std::max(top, scores[j] / tau);
  double sum = 0.0;
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (mask[j]) sum += std::exp(scores[j] / tau - top);
  const double lse = top + std::log(sum);
  std::vector<double> out(scores.size(), neg_inf);
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (mask[j]) out[j] = scores[j] / tau - lse;
  return out;
}

double inverse_count_weight(double base, long positives) {
  if (base == 0.0 || positives <= 0) return 0.0;
  return 1.0 / static_cast<double>(positives);
}

}  // namespace

std::vector<double> softmax_probs(std::span<const double> scores, double tau, std::span<const std::uint8_t> mask) {
  std::vector<double> lp = log_softmax(scores, tau, mask);
  for (std::size_t j = 0; j < lp.size(); ++j) lp[j] = mask[j] ? std::exp(lp[j]) : 0.0;
  return lp;
}

std::vector<double> clip_probs(std::span<const double> probs, int positive_count) {
  std::vector<double> out(probs.size());
  for (std::size_t j = 0; j < probs.size(); ++j) out[j] = std::min(probs[j] * positive_count, 1.0);
  return out;
}

double objective_loss(std::span<const double> yhat, std::span<const std::uint8_t> labels,
                      std::span<const std::uint8_t> mask, long* clamped) {
  double loss = 0.0;
  for (std::size_t k = 0; k < yhat.size(); ++k) {
    if (!mask[k] || !labels[k]) continue;
    double y = yhat[k];
    if (!(y >= kLogFloor)) {
      y = kLogFloor;
      if (clamped) ++*clamped;
    }
    loss -= std::log(y);
  }
  return loss;
}

LossBreakdown total_loss(const std::array<double, kNumObjectives>& losses,
                         const std::array<long, kNumObjectives>& positives, const LossWeights& weights) {
  LossBreakdown b;
  b.loss = losses;
  b.positives = positives;
  for (int o = 0; o < kNumObjectives; ++o) {
    b.weight[o] = weights.mode == WeightMode::Fixed ? weights.w[o] : inverse_count_weight(weights.w[o], positives[o]);
    b.weighted[o] = positives[o] > 0 ? b.weight[o] * losses[o] : 0.0;
    b.total += b.weighted[o];
  }
  return b;
}

SampleObjective evaluate_sample(std::span<const double> scores, double tau, std::span<const std::uint8_t> mask,
                                const std::array<std::span<const std::uint8_t>, kNumObjectives>& labels) {
  SampleObjective r;
  const std::vector<double> logp = log_softmax(scores, tau, mask);
  r.probs.resize(scores.size());
  for (std::size_t j = 0; j < scores.size(); ++j) r.probs[j] = mask[j] ? std::exp(logp[j]) : 0.0;

  const double log_floor = std::log(kLogFloor);
  for (int o = 0; o < kNumObjectives; ++o) {
    const auto& y = labels[o];
    long n = 0;
    for (std::size_t k = 0; k < y.size(); ++k)
      if (mask[k] && y[k]) ++n;
    r.positives[o] = n;
    if (n == 0) continue;
    const double log_n = std::log(static_cast<double>(n));
    double loss = 0.0;
    for (std::size_t k = 0; k < y.size(); ++k) {
      if (!mask[k] || !y[k]) continue;
      const double log_yhat = logp[k] + log_n;
      if (log_yhat >= 0.0) continue;  // clipped at 1: no loss, no gradient
      if (log_yhat < log_floor) ++r.clamped_logs;
      if (!std::isfinite(log_yhat)) {
        loss -= log_floor;
        continue;
      }
      loss -= log_yhat;
      r.active_positives[o].push_back(static_cast<int>(k));
    }
    r.loss[o] = loss;
  }
  return r;
}

std::vector<double> SampleObjective::gradient(const std::array<double, kNumObjectives>& w, double tau) const {
  double coupling = 0.0;
  for (int o = 0; o < kNumObjectives; ++o) coupling += w[o] * static_cast<double>(active_positives[o].size());
  std::vector<double> g(probs.size());
  for (std::size_t j = 0; j < probs.size(); ++j) g[j] = coupling * probs[j] / tau;
  for (int o = 0; o < kNumObjectives; ++o)
    for (int k : active_positives[o]) g[k] -= w[o] / tau;
  return g;
}

std::vector<double> loss_gradient(std::span<const double> scores,
                                  const std::array<std::span<const std::uint8_t>, kNumObjectives>& labels,
                                  double tau, const LossWeights& weights, std::span<const std::uint8_t> mask,
                                  LossBreakdown* breakdown) {
  const SampleObjective so = evaluate_sample(scores, tau, mask, labels);
  const LossBreakdown b = total_loss(so.loss, so.positives, weights);
  if (breakdown) {
    *breakdown = b;
    breakdown->clamped_logs = so.clamped_logs;
  }
  return so.gradient(b.weight, tau);
}

}  // namespace moppr
