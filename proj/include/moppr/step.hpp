#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "moppr/features.hpp"
#include "moppr/model.hpp"
#include "moppr/objective.hpp"
#include "moppr/samples.hpp"

namespace moppr {

/// A batch resolved into tower inputs. Items are deduplicated; every
/// candidate refers to a row of `items`. Per sample the candidate list is
/// [own slots (impressions, under-impressions, hard negatives) | shared
/// negatives | online negatives].
struct BatchInputs {
  std::vector<UserQueryFeatures> user_query;
  std::vector<ItemFeatures> items;

  std::vector<std::vector<int>> own_item;
  std::vector<std::vector<std::uint8_t>> own_mask;
  std::vector<std::array<std::vector<std::uint8_t>, kNumObjectives>> own_labels;

  std::vector<int> shared_item;
  std::vector<std::vector<std::uint8_t>> shared_mask;

  std::vector<std::vector<int>> online_item;

  std::size_t num_samples() const { return user_query.size(); }
  std::size_t candidate_count(std::size_t s) const {
    return own_item[s].size() + shared_item.size() + online_item[s].size();
  }
};

BatchInputs resolve_batch(const Batch& batch, const World& world);

struct BatchLoss {
  LossBreakdown breakdown;
  /// Per sample, per candidate: the inner-product score.
  std::vector<std::vector<double>> scores;
};

/// Forward pass, four-objective loss and (if `grads` is non-null) the
/// gradient of the weighted total with respect to every parameter, added
/// into `grads`.
template <class T>
BatchLoss batch_loss(const TwoTowerModel<T>& model, const Parameters<T>& params, const BatchInputs& inputs,
                     const LossWeights& weights, Parameters<T>* grads);

extern template BatchLoss batch_loss<float>(const TwoTowerModel<float>&, const Parameters<float>&,
                                            const BatchInputs&, const LossWeights&, Parameters<float>*);
extern template BatchLoss batch_loss<double>(const TwoTowerModel<double>&, const Parameters<double>&,
                                             const BatchInputs&, const LossWeights&, Parameters<double>*);

}  // namespace moppr
