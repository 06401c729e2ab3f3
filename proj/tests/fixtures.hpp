#pragma once

// Small hand-sized fixtures shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "moppr/model.hpp"
#include "moppr/step.hpp"

namespace fixtures {

using namespace moppr;

inline FeatureSpace tiny_space() {
  FeatureSpace s;
  s.num_users = 5;
  s.num_queries = 4;
  s.num_items = 12;
  s.num_categories = 4;
  s.num_brands = 3;
  s.num_sellers = 3;
  s.vocab_size = 20;
  return s;
}

inline ModelConfig tiny_model(int d = 4, int out_dim = 4) {
  ModelConfig c;
  c.d = d;
  c.out_dim = out_dim;
  c.uq_hidden = {5, 6, 5};
  c.item_hidden = {6, 5, 4};
  return c;
}

inline int pick(std::mt19937_64& rng, int n) { return std::uniform_int_distribution<int>(0, n - 1)(rng); }

inline UserQueryFeatures random_user_query(std::mt19937_64& rng, const FeatureSpace& s, int terms = 3,
                                           std::array<int, kPartitions> lengths = {2, 3, 4}) {
  UserQueryFeatures f;
  f.user = pick(rng, s.num_users);
  f.profile = {pick(rng, kAgeBands), pick(rng, kGenderBands), pick(rng, kPowerLevels)};
  f.query = pick(rng, s.num_queries);
  f.freq_bucket = pick(rng, kQueryFreqBuckets);
  for (int k = 0; k < terms; ++k) f.terms.push_back(pick(rng, s.vocab_size));
  f.relevant_categories = {0, 2};
  for (int p = 0; p < kPartitions; ++p)
    for (int k = 0; k < lengths[p]; ++k)
      f.behaviors[p].push_back({pick(rng, s.num_items), pick(rng, s.num_categories), pick(rng, s.num_brands)});
  return f;
}

inline ItemFeatures random_item(std::mt19937_64& rng, const FeatureSpace& s, ItemId id) {
  ItemFeatures f;
  f.id = id;
  f.category = pick(rng, s.num_categories);
  f.brand = pick(rng, s.num_brands);
  f.seller = pick(rng, s.num_sellers);
  f.price_bucket = pick(rng, kPriceBuckets);
  for (int k = 0; k < 3; ++k) f.title.push_back(pick(rng, s.vocab_size));
  std::uniform_real_distribution<float> u(0.0f, 3.0f);
  for (auto& v : f.stats) v = u(rng);
  return f;
}

/// One sample; own slots carry at least one positive for every objective,
/// followed by shared and online negatives.
inline BatchInputs one_sample_inputs(std::mt19937_64& rng, const FeatureSpace& s) {
  BatchInputs in;
  in.user_query.push_back(random_user_query(rng, s));
  for (ItemId id = 0; id < 9; ++id) in.items.push_back(random_item(rng, s, id));
  in.own_item = {{0, 1, 2, 3, 4, 5}};
  in.own_mask = {{1, 1, 1, 1, 1, 0}};
  std::array<std::vector<std::uint8_t>, kNumObjectives> labels;
  labels[0] = {1, 1, 1, 1, 1, 0};  // relevance
  labels[1] = {1, 1, 1, 0, 0, 0};  // exposure
  labels[2] = {1, 1, 0, 0, 0, 0};  // click
  labels[3] = {1, 0, 0, 0, 0, 0};  // purchase
  in.own_labels = {labels};
  in.shared_item = {6, 7};
  in.shared_mask = {{1, 1}};
  in.online_item = {{8}};
  return in;
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

/// Fourth-order central differences of the full weighted loss against
/// batch_loss's analytic gradient, over every parameter entry. At tau = 0.02
/// the loss is curved enough that the two-point stencil's truncation error
/// alone exceeds 1e-5, and entries many orders below the largest gradient
/// sit under the forward pass's rounding noise; those are compared against
/// `rel_floor` times the largest analytic entry instead of their own size.
inline GradCheck finite_difference_check(const TwoTowerModel<double>& model, const Parameters<double>& params,
                                         const BatchInputs& in, const LossWeights& w, double h = 3e-4,
                                         double rel_floor = 1e-3) {
  Parameters<double> grads = model.zero_parameters();
  batch_loss(model, params, in, w, &grads);
  double largest = 0.0;
  for (std::size_t t = 0; t < grads.size(); ++t)
    largest = std::max(largest, grads[static_cast<int>(t)].cwiseAbs().maxCoeff());
  const double floor = rel_floor * largest;
  Parameters<double> probe = params;
  GradCheck out;
  for (std::size_t t = 0; t < params.size(); ++t) {
    const int ti = static_cast<int>(t);
    for (Eigen::Index k = 0; k < params[ti].size(); ++k) {
      const double keep = probe[ti].data()[k];
      auto f = [&](double dx) {
        probe[ti].data()[k] = keep + dx;
        return batch_loss<double>(model, probe, in, w, nullptr).breakdown.total;
      };
      const double fd = (f(-2 * h) - 8 * f(-h) + 8 * f(h) - f(2 * h)) / (12 * h);
      probe[ti].data()[k] = keep;
      const double an = grads[ti].data()[k];
      const double rel = std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), floor});
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst = model.layout().names[t] + "[" + std::to_string(k) + "]";
      }
      ++out.checked;
    }
  }
  return out;
}

}  // namespace fixtures
