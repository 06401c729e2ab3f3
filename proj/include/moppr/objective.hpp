#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "moppr/common.hpp"

namespace moppr {

/// Lower bound applied to a clipped probability inside the log.
inline constexpr double kLogFloor = 1e-12;

enum class WeightMode : std::uint8_t { Fixed = 0, InversePositiveCount = 1 };

struct LossWeights {
  /// Used as-is in Fixed mode; in InversePositiveCount mode a zero entry
  /// still disables the objective.
  std::array<double, kNumObjectives> w{1.0, 1.0, 1.0, 1.0};
  WeightMode mode = WeightMode::InversePositiveCount;
  /// InversePositiveCount only: count positives per sample instead of per mini-batch.
  bool sample_level = false;

  double& operator[](ObjectiveId o) { return w[static_cast<int>(o)]; }
  double operator[](ObjectiveId o) const { return w[static_cast<int>(o)]; }
};

struct LossBreakdown {
  /// Unweighted L_o, summed over samples.
  std::array<double, kNumObjectives> loss{};
  /// Effective weight w_o (batch-level modes).
  std::array<double, kNumObjectives> weight{};
  std::array<double, kNumObjectives> weighted{};
  std::array<long, kNumObjectives> positives{};
  double total = 0.0;
  /// Positives whose log argument fell below kLogFloor.
  long clamped_logs = 0;
};

/// Temperature softmax over unmasked slots; masked slots get probability 0.
/// Throws InvalidInput when tau <= 0 or every slot is masked.
std::vector<double> softmax_probs(std::span<const double> scores, double tau, std::span<const std::uint8_t> mask);

/// min(p * positive_count, 1) elementwise.
std::vector<double> clip_probs(std::span<const double> probs, int positive_count);

/// -sum over unmasked positives of log(yhat); 0 when there are no positives.
double objective_loss(std::span<const double> yhat, std::span<const std::uint8_t> labels,
                      std::span<const std::uint8_t> mask, long* clamped = nullptr);

/// Combines per-objective losses with the given weighting. In
/// InversePositiveCount mode w_o = 1/|o+| (0 when |o+| = 0).
LossBreakdown total_loss(const std::array<double, kNumObjectives>& losses,
                         const std::array<long, kNumObjectives>& positives, const LossWeights& weights);

/// Per-sample result of the four-objective loss on one candidate list.
struct SampleObjective {
  std::array<double, kNumObjectives> loss{};
  std::array<long, kNumObjectives> positives{};
  /// Softmax probabilities over the candidate list.
  std::vector<double> probs;
  /// Per objective, the unmasked positives whose clipped probability is below 1.
  std::array<std::vector<int>, kNumObjectives> active_positives;
  long clamped_logs = 0;

  /// d(sum_o w_o L_o)/d scores for the given per-objective weights.
  std::vector<double> gradient(const std::array<double, kNumObjectives>& w, double tau) const;
};

/// Evaluates every objective on one sample. `labels[o]` are aligned with `scores`.
SampleObjective evaluate_sample(std::span<const double> scores, double tau, std::span<const std::uint8_t> mask,
                                const std::array<std::span<const std::uint8_t>, kNumObjectives>& labels);

/// Full weighted loss of one sample and its gradient with respect to scores.
/// Weights are taken as fixed per-objective values, except that
/// InversePositiveCount mode uses this sample's positive counts.
std::vector<double> loss_gradient(std::span<const double> scores,
                                  const std::array<std::span<const std::uint8_t>, kNumObjectives>& labels,
                                  double tau, const LossWeights& weights, std::span<const std::uint8_t> mask,
                                  LossBreakdown* breakdown = nullptr);

}  // namespace moppr
