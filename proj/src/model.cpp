#include "moppr/model.hpp"

#include <cmath>
#include <string>

#include "moppr/rng.hpp"

namespace moppr {

namespace {

template <class T>
RowVec<T> softmax_row(const RowVec<T>& logits) {
  RowVec<T> e = (logits.array() - logits.maxCoeff()).exp().matrix();
  return e / e.sum();
}

template <class T>
void check_finite(const Mat<T>& m, const char* tower, int layer) {
  if (!m.allFinite())
    throw NumericError(std::string("non-finite activation in ") + tower + " tower, layer " + std::to_string(layer));
}

void check_index(int v, int n, const char* what) {
  if (v < 0 || v >= n) throw InvalidInput(std::string(what) + " id out of range: " + std::to_string(v));
}

}  // namespace

void ModelConfig::validate() const {
  if (d < 1) throw InvalidConfig("model config: d must be >= 1");
  if (out_dim < 1) throw InvalidConfig("model config: out_dim must be >= 1");
  if (!(tau > 0.0)) throw InvalidConfig("model config: tau must be > 0");
  if (uq_hidden.size() != kMlpHidden || item_hidden.size() != kMlpHidden)
    throw InvalidConfig("model config: each tower needs exactly three hidden layer sizes");
  for (int h : uq_hidden)
    if (h < 1) throw InvalidConfig("model config: hidden sizes must be >= 1");
  for (int h : item_hidden)
    if (h < 1) throw InvalidConfig("model config: hidden sizes must be >= 1");
  if (!(layer_norm_eps > 0.0)) throw InvalidConfig("model config: layer_norm_eps must be > 0");
}

ParameterLayout ParameterLayout::make(const ModelConfig& c, const FeatureSpace& s) {
  c.validate();
  ParameterLayout l;
  auto add = [&l](const std::string& name, int rows, int cols) {
    l.names.push_back(name);
    l.shapes.emplace_back(rows, cols);
    return static_cast<int>(l.names.size()) - 1;
  };
  const int d = c.d;
  l.user_id = add("emb.user_id", s.num_users, d);
  l.age = add("emb.age", kAgeBands, d);
  l.gender = add("emb.gender", kGenderBands, d);
  l.power = add("emb.power", kPowerLevels, d);
  l.query_id = add("emb.query_id", s.num_queries, d);
  l.query_freq = add("emb.query_freq", kQueryFreqBuckets, d);
  l.query_term = add("emb.query_term", s.vocab_size, d);
  l.title_term = add("emb.title_term", s.vocab_size, d);
  l.item_id = add("emb.item_id", s.num_items, d);
  l.category = add("emb.category", s.num_categories, d);
  l.brand = add("emb.brand", s.num_brands, d);
  l.seller = add("emb.seller", s.num_sellers, d);
  l.price_bucket = add("emb.price_bucket", kPriceBuckets, d);
  l.w1 = add("query_unit.w1", c.user_dim(), d);
  l.b1 = add("query_unit.b1", 1, d);
  const char* part_names[kPartitions] = {"realtime", "short_term", "long_term"};
  for (int p = 0; p < kPartitions; ++p) {
    l.w_behavior[p] = add(std::string("behavior.") + part_names[p] + ".w", c.d_uq(), c.d_i());
    l.b_behavior[p] = add(std::string("behavior.") + part_names[p] + ".b", 1, c.d_i());
  }
  auto add_mlp = [&](const std::string& prefix, int in, const std::vector<int>& hidden, Mlp& m) {
    int width = in;
    for (int k = 0; k < kMlpHidden; ++k) {
      m.w[k] = add(prefix + ".fc" + std::to_string(k) + ".w", width, hidden[k]);
      m.b[k] = add(prefix + ".fc" + std::to_string(k) + ".b", 1, hidden[k]);
      m.gain[k] = add(prefix + ".ln" + std::to_string(k) + ".gain", 1, hidden[k]);
      m.offset[k] = add(prefix + ".ln" + std::to_string(k) + ".offset", 1, hidden[k]);
      width = hidden[k];
    }
    m.w[kMlpHidden] = add(prefix + ".fc" + std::to_string(kMlpHidden) + ".w", width, c.out_dim);
    m.b[kMlpHidden] = add(prefix + ".fc" + std::to_string(kMlpHidden) + ".b", 1, c.out_dim);
  };
  add_mlp("mlp_uq", c.uq_input_dim(), c.uq_hidden, l.uq);
  add_mlp("mlp_item", c.item_input_dim(), c.item_hidden, l.item);
  return l;
}

int ParameterLayout::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<int>(i);
  throw NotFound("no parameter named " + name);
}

double score(std::span<const float> user_query, std::span<const float> item) {
  if (user_query.size() != item.size()) throw InvalidInput("score: embedding dimensions differ");
  double s = 0.0;
  for (std::size_t k = 0; k < item.size(); ++k) s += static_cast<double>(user_query[k]) * item[k];
  return s;
}

// ---------------------------------------------------------------------------
// Building blocks

template <class T>
Mat<T> l2_normalize_rows(const Mat<T>& x, ColVec<T>* norms) {
  ColVec<T> n = x.rowwise().norm();
  Mat<T> out = Mat<T>::Zero(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    if (n(r) > T(0)) out.row(r) = x.row(r) / n(r);
  if (norms) *norms = std::move(n);
  return out;
}

template <class T>
RowVec<T> query_semantic_unit(const Mat<T>& terms, const RowVec<T>& user, const Mat<T>& w1, const Mat<T>& b1,
                              QuerySemanticTape<T>* tape) {
  const Eigen::Index n = terms.rows();
  const Eigen::Index d = terms.cols();
  if (n == 0) throw InvalidInput("query semantic unit: empty query");
  const T scale = T(1) / std::sqrt(static_cast<T>(d));

  RowVec<T> mean = terms.colwise().mean();

  Mat<T> logits = (terms * terms.transpose()) * scale;
  Mat<T> attn(n, n);
  for (Eigen::Index r = 0; r < n; ++r) attn.row(r) = softmax_row<T>(logits.row(r));
  Mat<T> self_out = attn * terms;
  RowVec<T> pooled(d);
  std::vector<int> argmax(static_cast<std::size_t>(d));
  for (Eigen::Index j = 0; j < d; ++j) {
    Eigen::Index best = 0;
    for (Eigen::Index r = 1; r < n; ++r)
      if (self_out(r, j) > self_out(best, j)) best = r;
    argmax[static_cast<std::size_t>(j)] = static_cast<int>(best);
    pooled(j) = self_out(best, j);
  }

  RowVec<T> pq = user * w1 + b1;
  RowVec<T> pw = softmax_row<T>(RowVec<T>((pq * terms.transpose()) * scale));
  RowVec<T> personal = pw * terms;

  RowVec<T> out(3 * d);
  out << mean, pooled, personal;
  if (tape) {
    tape->terms = terms;
    tape->user = user;
    tape->self_attention = std::move(attn);
    tape->self_output = std::move(self_out);
    tape->argmax = std::move(argmax);
    tape->personal_query = std::move(pq);
    tape->personal_weights = std::move(pw);
  }
  return out;
}

template <class T>
void query_semantic_unit_backward(const QuerySemanticTape<T>& tape, const Mat<T>& w1, const RowVec<T>& d_qo,
                                  Mat<T>& d_terms, RowVec<T>& d_user, Mat<T>& d_w1, Mat<T>& d_b1) {
  const Mat<T>& E = tape.terms;
  const Eigen::Index n = E.rows();
  const Eigen::Index d = E.cols();
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  RowVec<T> d_mean = d_qo.segment(0, d);
  RowVec<T> d_pool = d_qo.segment(d, d);
  RowVec<T> d_pers = d_qo.segment(2 * d, d);

  // Mean pooling.
  d_terms.rowwise() += d_mean / static_cast<T>(n);

  // Max pooling over self-attention output.
  Mat<T> d_out = Mat<T>::Zero(n, d);
  for (Eigen::Index j = 0; j < d; ++j) d_out(tape.argmax[static_cast<std::size_t>(j)], j) += d_pool(j);
  const Mat<T>& A = tape.self_attention;
  Mat<T> d_attn = d_out * E.transpose();
  d_terms += A.transpose() * d_out;
  Mat<T> d_logits(n, n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const T inner = d_attn.row(r).dot(A.row(r));
    d_logits.row(r) = (A.row(r).array() * (d_attn.row(r).array() - inner)).matrix();
  }
  d_terms += ((d_logits + d_logits.transpose()) * E) * scale;

  // Personalized attention.
  const RowVec<T>& pw = tape.personal_weights;
  d_terms += pw.transpose() * d_pers;
  RowVec<T> d_pw = d_pers * E.transpose();
  const T inner = d_pw.dot(pw);
  RowVec<T> d_plogits = (pw.array() * (d_pw.array() - inner)).matrix();
  RowVec<T> d_pq = (d_plogits * E) * scale;
  d_terms += (d_plogits.transpose() * tape.personal_query) * scale;
  d_w1 += tape.user.transpose() * d_pq;
  d_b1 += d_pq;
  d_user += d_pq * w1.transpose();
}

template <class T>
RowVec<T> behavior_attention(const RowVec<T>& input, const Mat<T>& w, const Mat<T>& b, const Mat<T>& values,
                             AttentionTape<T>* tape) {
  const Eigen::Index di = w.cols();
  if (values.rows() == 0) {
    if (tape) {
      tape->input = input;
      tape->values.resize(0, di);
    }
    return RowVec<T>::Zero(di);
  }
  const T scale = T(1) / std::sqrt(static_cast<T>(di));
  RowVec<T> query = input * w + b;
  RowVec<T> weights = softmax_row<T>(RowVec<T>((query * values.transpose()) * scale));
  RowVec<T> out = weights * values;
  if (tape) {
    tape->input = input;
    tape->query = std::move(query);
    tape->values = values;
    tape->weights = std::move(weights);
  }
  return out;
}

template <class T>
void behavior_attention_backward(const AttentionTape<T>& tape, const Mat<T>& w, const RowVec<T>& d_out,
                                 RowVec<T>& d_input, Mat<T>& d_w, Mat<T>& d_b, Mat<T>& d_values) {
  if (tape.values.rows() == 0) return;
  const T scale = T(1) / std::sqrt(static_cast<T>(w.cols()));
  const RowVec<T>& a = tape.weights;
  d_values += a.transpose() * d_out;
  RowVec<T> d_a = d_out * tape.values.transpose();
  const T inner = d_a.dot(a);
  RowVec<T> d_logits = (a.array() * (d_a.array() - inner)).matrix();
  RowVec<T> d_query = (d_logits * tape.values) * scale;
  d_values += (d_logits.transpose() * tape.query) * scale;
  d_w += tape.input.transpose() * d_query;
  d_b += d_query;
  d_input += d_query * w.transpose();
}

// ---------------------------------------------------------------------------
// TwoTowerModel

template <class T>
TwoTowerModel<T>::TwoTowerModel(ModelConfig config, FeatureSpace space)
    : config_(std::move(config)), space_(space), layout_(ParameterLayout::make(config_, space_)) {}

template <class T>
Parameters<T> TwoTowerModel<T>::zero_parameters() const {
  Parameters<T> p;
  p.tensors.reserve(layout_.size());
  for (const auto& [r, c] : layout_.shapes) p.tensors.push_back(Mat<T>::Zero(r, c));
  return p;
}

template <class T>
Parameters<T> TwoTowerModel<T>::init_parameters(std::uint64_t seed) const {
  Parameters<T> p = zero_parameters();
  auto fill_uniform = [&](int idx, double bound) {
    Rng rng = make_rng(seed, {0x696e6974ULL, static_cast<std::uint64_t>(idx)});
    std::uniform_real_distribution<double> dist(-bound, bound);
    Mat<T>& m = p[idx];
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = static_cast<T>(dist(rng));
  };
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    const std::string& name = layout_.names[i];
    const auto [rows, cols] = layout_.shapes[i];
    const int idx = static_cast<int>(i);
    if (name.rfind("emb.", 0) == 0) {
      fill_uniform(idx, 1.0 / std::sqrt(static_cast<double>(cols)));
    } else if (name.size() > 2 && name.compare(name.size() - 2, 2, ".w") == 0) {
      fill_uniform(idx, 1.0 / std::sqrt(static_cast<double>(rows)));
    } else if (name.find(".gain") != std::string::npos) {
      p[idx].setOnes();
    }
  }
  fill_uniform(layout_.w1, 1.0 / std::sqrt(static_cast<double>(layout_.shapes[layout_.w1].first)));
  return p;
}

template <class T>
Mat<T> TwoTowerModel<T>::mlp_forward(const Parameters<T>& p, const ParameterLayout::Mlp& idx, const Mat<T>& x,
                                     MlpTape<T>* tape, const char* tower) const {
  const T slope = static_cast<T>(config_.leaky_slope);
  const T eps = static_cast<T>(config_.layer_norm_eps);
  Mat<T> h = x;
  for (int k = 0; k < kMlpHidden; ++k) {
    Mat<T> z = h * p[idx.w[k]];
    z.rowwise() += RowVec<T>(p[idx.b[k]]);
    ColVec<T> mu = z.rowwise().mean();
    z.colwise() -= mu;
    ColVec<T> var = z.array().square().rowwise().mean().matrix();
    ColVec<T> inv_std = (var.array() + eps).rsqrt().matrix();
    Mat<T> xhat = z.array().colwise() * inv_std.array();
    Mat<T> y = xhat.array().rowwise() * RowVec<T>(p[idx.gain[k]]).array();
    y.rowwise() += RowVec<T>(p[idx.offset[k]]);
    Mat<T> a = y.unaryExpr([slope](T v) { return v > T(0) ? v : slope * v; });
    check_finite(a, tower, k);
    if (tape) {
      tape->input[k] = std::move(h);
      tape->xhat[k] = std::move(xhat);
      tape->inv_std[k] = std::move(inv_std);
      tape->normed[k] = std::move(y);
    }
    h = std::move(a);
  }
  Mat<T> out = h * p[idx.w[kMlpHidden]];
  out.rowwise() += RowVec<T>(p[idx.b[kMlpHidden]]);
  check_finite(out, tower, kMlpHidden);
  ColVec<T> norms;
  Mat<T> normalized = l2_normalize_rows<T>(out, &norms);
  if (tape) {
    tape->input[kMlpHidden] = std::move(h);
    tape->raw_output = std::move(out);
    tape->norms = std::move(norms);
    tape->output = normalized;
  }
  return normalized;
}

template <class T>
Mat<T> TwoTowerModel<T>::mlp_backward(const Parameters<T>& p, const ParameterLayout::Mlp& idx, const MlpTape<T>& tape,
                                      const Mat<T>& d_out, Parameters<T>& g) const {
  const T slope = static_cast<T>(config_.leaky_slope);
  // l2 normalization
  Mat<T> d_raw = Mat<T>::Zero(d_out.rows(), d_out.cols());
  for (Eigen::Index r = 0; r < d_out.rows(); ++r) {
    const T n = tape.norms(r);
    if (n > T(0)) {
      const auto y = tape.output.row(r);
      d_raw.row(r) = (d_out.row(r) - y * y.dot(d_out.row(r))) / n;
    }
  }
  g[idx.w[kMlpHidden]] += tape.input[kMlpHidden].transpose() * d_raw;
  g[idx.b[kMlpHidden]] += d_raw.colwise().sum();
  Mat<T> d_h = d_raw * p[idx.w[kMlpHidden]].transpose();
  for (int k = kMlpHidden - 1; k >= 0; --k) {
    const Mat<T>& y = tape.normed[k];
    Mat<T> d_y = d_h.array() * y.unaryExpr([slope](T v) { return v > T(0) ? T(1) : slope; }).array();
    const Mat<T>& xhat = tape.xhat[k];
    g[idx.gain[k]] += (d_y.array() * xhat.array()).colwise().sum().matrix();
    g[idx.offset[k]] += d_y.colwise().sum();
    Mat<T> d_xhat = d_y.array().rowwise() * RowVec<T>(p[idx.gain[k]]).array();
    ColVec<T> m1 = d_xhat.rowwise().mean();
    ColVec<T> m2 = (d_xhat.array() * xhat.array()).rowwise().mean().matrix();
    Mat<T> d_z = d_xhat;
    d_z.colwise() -= m1;
    d_z -= (xhat.array().colwise() * m2.array()).matrix();
    d_z = d_z.array().colwise() * tape.inv_std[k].array();
    g[idx.w[k]] += tape.input[k].transpose() * d_z;
    g[idx.b[k]] += d_z.colwise().sum();
    d_h = d_z * p[idx.w[k]].transpose();
  }
  return d_h;
}

template <class T>
Mat<T> TwoTowerModel<T>::user_query_input(const Parameters<T>& p, std::span<const UserQueryFeatures> inputs,
                                          UserQueryTape<T>* tape) const {
  const ParameterLayout& L = layout_;
  const int d = config_.d;
  const int di = config_.d_i();
  const auto B = static_cast<Eigen::Index>(inputs.size());
  Mat<T> x(B, config_.uq_input_dim());
  if (tape) {
    tape->inputs.assign(inputs.begin(), inputs.end());
    tape->semantic.assign(inputs.size(), {});
    tape->attention.assign(inputs.size(), {});
  }
  for (Eigen::Index s = 0; s < B; ++s) {
    const UserQueryFeatures& f = inputs[static_cast<std::size_t>(s)];
    check_index(f.user, space_.num_users, "user");
    check_index(f.query, space_.num_queries, "query");
    check_index(f.profile.age_band, kAgeBands, "age band");
    check_index(f.profile.gender_band, kGenderBands, "gender band");
    check_index(f.profile.power_level, kPowerLevels, "power level");
    check_index(f.freq_bucket, kQueryFreqBuckets, "query frequency bucket");

    RowVec<T> eu(config_.user_dim());
    eu << p[L.user_id].row(f.user), p[L.age].row(f.profile.age_band), p[L.gender].row(f.profile.gender_band),
        p[L.power].row(f.profile.power_level);

    RowVec<T> cat_mean = RowVec<T>::Zero(d);
    for (CategoryId c : f.relevant_categories) {
      check_index(c, space_.num_categories, "category");
      cat_mean += p[L.category].row(c);
    }
    if (!f.relevant_categories.empty()) cat_mean /= static_cast<T>(f.relevant_categories.size());
    RowVec<T> eq(config_.query_side_dim());
    eq << p[L.query_id].row(f.query), p[L.query_freq].row(f.freq_bucket), cat_mean;

    Mat<T> terms(static_cast<Eigen::Index>(f.terms.size()), d);
    for (std::size_t k = 0; k < f.terms.size(); ++k) {
      check_index(f.terms[k], space_.vocab_size, "term");
      terms.row(static_cast<Eigen::Index>(k)) = p[L.query_term].row(f.terms[k]);
    }
    QuerySemanticTape<T>* st = tape ? &tape->semantic[static_cast<std::size_t>(s)] : nullptr;
    RowVec<T> qo = query_semantic_unit<T>(terms, eu, p[L.w1], p[L.b1], st);

    RowVec<T> attn_in(config_.d_uq());
    attn_in << qo, eq, eu;

    x.row(s).segment(0, config_.user_dim()) = eu;
    x.row(s).segment(config_.user_dim(), config_.query_side_dim()) = eq;
    x.row(s).segment(config_.user_dim() + config_.query_side_dim(), 3 * d) = qo;
    Eigen::Index off = config_.user_dim() + config_.query_side_dim() + 3 * d;
    for (int part = 0; part < kPartitions; ++part) {
      const auto& beh = f.behaviors[part];
      Mat<T> values(static_cast<Eigen::Index>(beh.size()), di);
      for (std::size_t k = 0; k < beh.size(); ++k) {
        check_index(beh[k].id, space_.num_items, "behavior item");
        check_index(beh[k].category, space_.num_categories, "category");
        check_index(beh[k].brand, space_.num_brands, "brand");
        values.row(static_cast<Eigen::Index>(k)) << p[L.item_id].row(beh[k].id), p[L.category].row(beh[k].category),
            p[L.brand].row(beh[k].brand);
      }
      AttentionTape<T>* at = tape ? &tape->attention[static_cast<std::size_t>(s)][part] : nullptr;
      x.row(s).segment(off, di) = behavior_attention<T>(attn_in, p[L.w_behavior[part]], p[L.b_behavior[part]], values, at);
      off += di;
    }
  }
  return x;
}

template <class T>
Mat<T> TwoTowerModel<T>::user_query_forward(const Parameters<T>& p, std::span<const UserQueryFeatures> inputs,
                                            UserQueryTape<T>* tape) const {
  Mat<T> x = user_query_input(p, inputs, tape);
  return mlp_forward(p, layout_.uq, x, tape ? &tape->mlp : nullptr, "user-query");
}

template <class T>
void TwoTowerModel<T>::user_query_backward(const Parameters<T>& p, const UserQueryTape<T>& tape, const Mat<T>& d_out,
                                           Parameters<T>& g) const {
  const ParameterLayout& L = layout_;
  const int d = config_.d;
  const int di = config_.d_i();
  const int ud = config_.user_dim();
  const int qd = config_.query_side_dim();
  Mat<T> dx = mlp_backward(p, L.uq, tape.mlp, d_out, g);

  for (std::size_t s = 0; s < tape.inputs.size(); ++s) {
    const UserQueryFeatures& f = tape.inputs[s];
    const auto row = static_cast<Eigen::Index>(s);
    RowVec<T> d_eu = dx.row(row).segment(0, ud);
    RowVec<T> d_eq = dx.row(row).segment(ud, qd);
    RowVec<T> d_qo = dx.row(row).segment(ud + qd, 3 * d);

    RowVec<T> d_attn_in = RowVec<T>::Zero(config_.d_uq());
    Eigen::Index off = ud + qd + 3 * d;
    for (int part = 0; part < kPartitions; ++part) {
      const AttentionTape<T>& at = tape.attention[s][part];
      if (at.values.rows() > 0) {
        Mat<T> d_values = Mat<T>::Zero(at.values.rows(), di);
        RowVec<T> d_h = dx.row(row).segment(off, di);
        behavior_attention_backward<T>(at, p[L.w_behavior[part]], d_h, d_attn_in, g[L.w_behavior[part]],
                                       g[L.b_behavior[part]], d_values);
        const auto& beh = f.behaviors[part];
        for (std::size_t k = 0; k < beh.size(); ++k) {
          const auto r = static_cast<Eigen::Index>(k);
          g[L.item_id].row(beh[k].id) += d_values.row(r).segment(0, d);
          g[L.category].row(beh[k].category) += d_values.row(r).segment(d, d);
          g[L.brand].row(beh[k].brand) += d_values.row(r).segment(2 * d, d);
        }
      }
      off += di;
    }
    d_qo += d_attn_in.segment(0, 3 * d);
    d_eq += d_attn_in.segment(3 * d, qd);
    d_eu += d_attn_in.segment(3 * d + qd, ud);

    const QuerySemanticTape<T>& st = tape.semantic[s];
    Mat<T> d_terms = Mat<T>::Zero(st.terms.rows(), d);
    query_semantic_unit_backward<T>(st, p[L.w1], d_qo, d_terms, d_eu, g[L.w1], g[L.b1]);
    for (std::size_t k = 0; k < f.terms.size(); ++k)
      g[L.query_term].row(f.terms[k]) += d_terms.row(static_cast<Eigen::Index>(k));

    g[L.query_id].row(f.query) += d_eq.segment(0, d);
    g[L.query_freq].row(f.freq_bucket) += d_eq.segment(d, d);
    if (!f.relevant_categories.empty()) {
      RowVec<T> share = d_eq.segment(2 * d, d) / static_cast<T>(f.relevant_categories.size());
      for (CategoryId c : f.relevant_categories) g[L.category].row(c) += share;
    }
    g[L.user_id].row(f.user) += d_eu.segment(0, d);
    g[L.age].row(f.profile.age_band) += d_eu.segment(d, d);
    g[L.gender].row(f.profile.gender_band) += d_eu.segment(2 * d, d);
    g[L.power].row(f.profile.power_level) += d_eu.segment(3 * d, d);
  }
}

template <class T>
Mat<T> TwoTowerModel<T>::item_input(const Parameters<T>& p, std::span<const ItemFeatures> inputs) const {
  const ParameterLayout& L = layout_;
  const int d = config_.d;
  const auto n = static_cast<Eigen::Index>(inputs.size());
  Mat<T> x(n, config_.item_input_dim());
  const T stats_scale = static_cast<T>(config_.stats_scale);
  for (Eigen::Index r = 0; r < n; ++r) {
    const ItemFeatures& f = inputs[static_cast<std::size_t>(r)];
    check_index(f.id, space_.num_items, "item");
    check_index(f.category, space_.num_categories, "category");
    check_index(f.brand, space_.num_brands, "brand");
    check_index(f.seller, space_.num_sellers, "seller");
    check_index(f.price_bucket, kPriceBuckets, "price bucket");
    RowVec<T> title = RowVec<T>::Zero(d);
    for (TermId t : f.title) {
      check_index(t, space_.vocab_size, "term");
      title += p[L.title_term].row(t);
    }
    if (!f.title.empty()) title /= static_cast<T>(f.title.size());
    x.row(r).segment(0, d) = p[L.item_id].row(f.id);
    x.row(r).segment(d, d) = p[L.category].row(f.category);
    x.row(r).segment(2 * d, d) = p[L.brand].row(f.brand);
    x.row(r).segment(3 * d, d) = p[L.seller].row(f.seller);
    x.row(r).segment(4 * d, d) = p[L.price_bucket].row(f.price_bucket);
    x.row(r).segment(5 * d, d) = title;
    for (int k = 0; k < kItemStats; ++k) x(r, 6 * d + k) = static_cast<T>(f.stats[k]) * stats_scale;
  }
  return x;
}

template <class T>
Mat<T> TwoTowerModel<T>::item_forward(const Parameters<T>& p, std::span<const ItemFeatures> inputs,
                                      ItemTape<T>* tape) const {
  Mat<T> x = item_input(p, inputs);
  if (tape) tape->inputs.assign(inputs.begin(), inputs.end());
  return mlp_forward(p, layout_.item, x, tape ? &tape->mlp : nullptr, "item");
}

template <class T>
void TwoTowerModel<T>::item_backward(const Parameters<T>& p, const ItemTape<T>& tape, const Mat<T>& d_out,
                                     Parameters<T>& g) const {
  const ParameterLayout& L = layout_;
  const int d = config_.d;
  Mat<T> dx = mlp_backward(p, L.item, tape.mlp, d_out, g);
  for (std::size_t r = 0; r < tape.inputs.size(); ++r) {
    const ItemFeatures& f = tape.inputs[r];
    const auto row = dx.row(static_cast<Eigen::Index>(r));
    g[L.item_id].row(f.id) += row.segment(0, d);
    g[L.category].row(f.category) += row.segment(d, d);
    g[L.brand].row(f.brand) += row.segment(2 * d, d);
    g[L.seller].row(f.seller) += row.segment(3 * d, d);
    g[L.price_bucket].row(f.price_bucket) += row.segment(4 * d, d);
    if (!f.title.empty()) {
      RowVec<T> share = row.segment(5 * d, d) / static_cast<T>(f.title.size());
      for (TermId t : f.title) g[L.title_term].row(t) += share;
    }
  }
}

#define MOPPR_INSTANTIATE(T)                                                                                      \
  template Mat<T> l2_normalize_rows<T>(const Mat<T>&, ColVec<T>*);                                                \
  template RowVec<T> query_semantic_unit<T>(const Mat<T>&, const RowVec<T>&, const Mat<T>&, const Mat<T>&,         \
                                            QuerySemanticTape<T>*);                                              \
  template void query_semantic_unit_backward<T>(const QuerySemanticTape<T>&, const Mat<T>&, const RowVec<T>&,     \
                                                Mat<T>&, RowVec<T>&, Mat<T>&, Mat<T>&);                          \
  template RowVec<T> behavior_attention<T>(const RowVec<T>&, const Mat<T>&, const Mat<T>&, const Mat<T>&,          \
                                           AttentionTape<T>*);                                                   \
  template void behavior_attention_backward<T>(const AttentionTape<T>&, const Mat<T>&, const RowVec<T>&,          \
                                               RowVec<T>&, Mat<T>&, Mat<T>&, Mat<T>&);                           \
  template class TwoTowerModel<T>;

MOPPR_INSTANTIATE(float)
MOPPR_INSTANTIATE(double)

#undef MOPPR_INSTANTIATE

}  // namespace moppr
