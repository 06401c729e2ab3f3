#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moppr/features.hpp"

namespace moppr {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <class T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

inline constexpr int kMlpHidden = 3;

struct ModelConfig {
  /// Embedding width of every categorical feature.
  int d = 8;
  std::vector<int> uq_hidden{64, 64, 64};
  std::vector<int> item_hidden{64, 64, 64};
  int out_dim = 32;
  double leaky_slope = 0.01;
  double tau = 0.02;
  double layer_norm_eps = 1e-6;
  /// Multiplier applied to the log1p statistics before they enter the item tower.
  double stats_scale = 0.25;

  /// e^u: user id, age, gender, power level.
  int user_dim() const { return 4 * d; }
  /// e^q: query id, frequency bucket, mean relevant-category embedding.
  int query_side_dim() const { return 3 * d; }
  /// Behavior item: id, category, brand.
  int d_i() const { return 3 * d; }
  /// Input width of the behavior-attention projections: concat(Q_o, e^q, e^u).
  int d_uq() const { return 3 * d + query_side_dim() + user_dim(); }
  /// concat(e^u, e^q, Q_o, H_B).
  int uq_input_dim() const { return user_dim() + query_side_dim() + 3 * d + kPartitions * d_i(); }
  /// Item id, category, brand, seller, price bucket, mean title terms, stats.
  int item_input_dim() const { return 6 * d + kItemStats; }

  void validate() const;
};

/// Names, shapes and well-known indices of every learnable tensor.
struct ParameterLayout {
  struct Mlp {
    std::array<int, kMlpHidden + 1> w{}, b{};
    std::array<int, kMlpHidden> gain{}, offset{};
  };

  std::vector<std::string> names;
  std::vector<std::pair<int, int>> shapes;

  int user_id = -1, age = -1, gender = -1, power = -1;
  int query_id = -1, query_freq = -1, query_term = -1, title_term = -1;
  int item_id = -1, category = -1, brand = -1, seller = -1, price_bucket = -1;
  int w1 = -1, b1 = -1;
  std::array<int, kPartitions> w_behavior{}, b_behavior{};
  Mlp uq, item;

  static ParameterLayout make(const ModelConfig& config, const FeatureSpace& space);
  int index_of(const std::string& name) const;
  std::size_t size() const { return names.size(); }
};

template <class T>
struct Parameters {
  std::vector<Mat<T>> tensors;

  Mat<T>& operator[](int i) { return tensors[static_cast<std::size_t>(i)]; }
  const Mat<T>& operator[](int i) const { return tensors[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return tensors.size(); }

  void set_zero() {
    for (auto& t : tensors) t.setZero();
  }
  template <class U>
  Parameters<U> cast() const {
    Parameters<U> out;
    out.tensors.reserve(tensors.size());
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }
  bool operator==(const Parameters& other) const {
    if (tensors.size() != other.tensors.size()) return false;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      if (tensors[i].rows() != other.tensors[i].rows() || tensors[i].cols() != other.tensors[i].cols()) return false;
      if (tensors[i] != other.tensors[i]) return false;
    }
    return true;
  }
};

template <class T>
struct QuerySemanticTape {
  Mat<T> terms;
  RowVec<T> user;
  Mat<T> self_attention;
  Mat<T> self_output;
  std::vector<int> argmax;
  RowVec<T> personal_query;
  RowVec<T> personal_weights;
};

template <class T>
struct AttentionTape {
  RowVec<T> input;
  RowVec<T> query;
  Mat<T> values;
  RowVec<T> weights;
};

template <class T>
struct MlpTape {
  std::array<Mat<T>, kMlpHidden + 1> input;
  std::array<Mat<T>, kMlpHidden> xhat;
  std::array<ColVec<T>, kMlpHidden> inv_std;
  std::array<Mat<T>, kMlpHidden> normed;
  Mat<T> raw_output;
  ColVec<T> norms;
  Mat<T> output;
};

template <class T>
struct UserQueryTape {
  std::vector<UserQueryFeatures> inputs;
  std::vector<QuerySemanticTape<T>> semantic;
  std::vector<std::array<AttentionTape<T>, kPartitions>> attention;
  MlpTape<T> mlp;
};

template <class T>
struct ItemTape {
  std::vector<ItemFeatures> inputs;
  MlpTape<T> mlp;
};

/// Q_o = concat(mean, max-pooled self-attention, user-personalized attention)
/// over the query term embeddings. Throws InvalidInput on an empty query.
template <class T>
RowVec<T> query_semantic_unit(const Mat<T>& term_embs, const RowVec<T>& user_emb, const Mat<T>& w1,
                              const Mat<T>& b1, QuerySemanticTape<T>* tape = nullptr);

/// Accumulates gradients of the semantic unit given dL/dQ_o.
template <class T>
void query_semantic_unit_backward(const QuerySemanticTape<T>& tape, const Mat<T>& w1, const RowVec<T>& d_qo,
                                  Mat<T>& d_terms, RowVec<T>& d_user, Mat<T>& d_w1, Mat<T>& d_b1);

/// softmax((input W + b) values^T / sqrt(d_i)) values; the zero vector when
/// `values` has no rows.
template <class T>
RowVec<T> behavior_attention(const RowVec<T>& input, const Mat<T>& w, const Mat<T>& b, const Mat<T>& values,
                             AttentionTape<T>* tape = nullptr);

template <class T>
void behavior_attention_backward(const AttentionTape<T>& tape, const Mat<T>& w, const RowVec<T>& d_out,
                                 RowVec<T>& d_input, Mat<T>& d_w, Mat<T>& d_b, Mat<T>& d_values);

/// Row-wise l2 normalization; zero rows stay zero.
template <class T>
Mat<T> l2_normalize_rows(const Mat<T>& x, ColVec<T>* norms = nullptr);

/// Two-tower network. Stateless: parameters are passed in, so one model
/// object serves any number of parameter sets.
template <class T>
class TwoTowerModel {
 public:
  TwoTowerModel(ModelConfig config, FeatureSpace space);

  const ModelConfig& config() const { return config_; }
  const FeatureSpace& space() const { return space_; }
  const ParameterLayout& layout() const { return layout_; }

  Parameters<T> init_parameters(std::uint64_t seed) const;
  Parameters<T> zero_parameters() const;

  /// Unit-norm user-query embeddings, one row per input.
  Mat<T> user_query_forward(const Parameters<T>& p, std::span<const UserQueryFeatures> inputs,
                            UserQueryTape<T>* tape = nullptr) const;
  /// Unit-norm item embeddings, one row per input.
  Mat<T> item_forward(const Parameters<T>& p, std::span<const ItemFeatures> inputs,
                      ItemTape<T>* tape = nullptr) const;

  void user_query_backward(const Parameters<T>& p, const UserQueryTape<T>& tape, const Mat<T>& d_out,
                           Parameters<T>& grads) const;
  void item_backward(const Parameters<T>& p, const ItemTape<T>& tape, const Mat<T>& d_out,
                     Parameters<T>& grads) const;

  /// The e^uq rows fed to MLP_uq (exposed for tests).
  Mat<T> user_query_input(const Parameters<T>& p, std::span<const UserQueryFeatures> inputs,
                          UserQueryTape<T>* tape = nullptr) const;
  Mat<T> item_input(const Parameters<T>& p, std::span<const ItemFeatures> inputs) const;

 private:
  Mat<T> mlp_forward(const Parameters<T>& p, const ParameterLayout::Mlp& idx, const Mat<T>& x, MlpTape<T>* tape,
                     const char* tower) const;
  Mat<T> mlp_backward(const Parameters<T>& p, const ParameterLayout::Mlp& idx, const MlpTape<T>& tape,
                      const Mat<T>& d_out, Parameters<T>& grads) const;

  ModelConfig config_;
  FeatureSpace space_;
  ParameterLayout layout_;
};

/// Inner-product score of two embeddings; throws InvalidInput on a dimension mismatch.
double score(std::span<const float> user_query, std::span<const float> item);

extern template class TwoTowerModel<float>;
extern template class TwoTowerModel<double>;

}  // namespace moppr
