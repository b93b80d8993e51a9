#pragma once

#include "metricforge/common.hpp"
#include "metricforge/layers.hpp"
#include "metricforge/rng.hpp"

#include <cmath>
#include <string>
#include <tuple>
#include <vector>

namespace metricforge {

struct HeadConfig {
  Index metrics = 3;
  Index width = 12;      // d, the encoded-feature width
  Index key_width = 4;   // d_k
  Index value_width = 4; // d_v
  std::uint64_t seed = 0;

  /// d_k = d_v = d / M.
  static HeadConfig with_defaults(Index width, Index metrics, std::uint64_t seed = 0) {
    return {metrics, width, width / metrics, width / metrics, seed};
  }
};

inline void validate(const HeadConfig& cfg) {
  if (cfg.metrics < 1 || cfg.width < 1 || cfg.key_width < 1 || cfg.value_width < 1) {
    throw Error(Errc::InvalidConfig, "metric head dimensions must all be positive");
  }
}

/// Per-metric query/key/value projections plus the pooled linear readout
/// that turns each metric's attended matrix into one score.
template <typename Scalar>
struct MetricProjectionSet {
  std::vector<Mat<Scalar>> query;  // M x (d x d_k)
  std::vector<Mat<Scalar>> key;    // M x (d x d_k)
  std::vector<Mat<Scalar>> value;  // M x (d x d_v)
  Mat<Scalar> readout;             // M x d_v, row i is r_i
  Mat<Scalar> bias;                // M x 1

  Index metric_count() const noexcept { return static_cast<Index>(query.size()); }
  Index input_width() const noexcept { return query.empty() ? 0 : query.front().rows(); }
  Index key_width() const noexcept { return query.empty() ? 0 : query.front().cols(); }
  Index value_width() const noexcept { return value.empty() ? 0 : value.front().cols(); }

  HeadConfig config() const {
    return {metric_count(), input_width(), key_width(), value_width(), 0};
  }

  static MetricProjectionSet zeros(const HeadConfig& cfg) {
    MetricProjectionSet p;
    for (Index i = 0; i < cfg.metrics; ++i) {
      p.query.push_back(Mat<Scalar>::Zero(cfg.width, cfg.key_width));
      p.key.push_back(Mat<Scalar>::Zero(cfg.width, cfg.key_width));
      p.value.push_back(Mat<Scalar>::Zero(cfg.width, cfg.value_width));
    }
    p.readout = Mat<Scalar>::Zero(cfg.metrics, cfg.value_width);
    p.bias = Mat<Scalar>::Zero(cfg.metrics, 1);
    return p;
  }

  template <typename To>
  MetricProjectionSet<To> cast() const {
    MetricProjectionSet<To> out;
    for (const auto& m : query) out.query.push_back(m.template cast<To>());
    for (const auto& m : key) out.key.push_back(m.template cast<To>());
    for (const auto& m : value) out.value.push_back(m.template cast<To>());
    out.readout = readout.template cast<To>();
    out.bias = bias.template cast<To>();
    return out;
  }
};

/// Calls f(name, mats...) for each parameter, walking several sets in lockstep.
template <typename F, typename... Sets>
void visit_head_params(F&& f, Sets&... sets) {
  const Index m = std::get<0>(std::forward_as_tuple(sets...)).metric_count();
  for (Index i = 0; i < m; ++i) {
    const auto s = std::to_string(i);
    f("head.query." + s, sets.query[static_cast<std::size_t>(i)]...);
    f("head.key." + s, sets.key[static_cast<std::size_t>(i)]...);
    f("head.value." + s, sets.value[static_cast<std::size_t>(i)]...);
  }
  f(std::string("head.readout"), sets.readout...);
  f(std::string("head.bias"), sets.bias...);
}

/// Entries uniform in (-1/sqrt(d), 1/sqrt(d)), bias zero, drawn in the
/// order query_0, key_0, value_0, ..., readout.
template <typename Scalar>
MetricProjectionSet<Scalar> init_head(const HeadConfig& cfg) {
  validate(cfg);
  auto p = MetricProjectionSet<Scalar>::zeros(cfg);
  SplitMix64 rng(cfg.seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.width));
  auto fill = [&](Mat<Scalar>& m) {
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) m(r, c) = static_cast<Scalar>(rng.uniform(-bound, bound));
  };
  for (Index i = 0; i < cfg.metrics; ++i) {
    fill(p.query[static_cast<std::size_t>(i)]);
    fill(p.key[static_cast<std::size_t>(i)]);
    fill(p.value[static_cast<std::size_t>(i)]);
  }
  fill(p.readout);
  return p;
}

template <typename Scalar>
struct Projection {
  Mat<Scalar> query;  // L x d_k
  Mat<Scalar> key;    // L x d_k
  Mat<Scalar> value;  // L x d_v
};

template <typename Scalar>
void check_head_input(const Mat<Scalar>& ef, const MetricProjectionSet<Scalar>& p) {
  require_shape(p.metric_count() >= 1, "metric head has no metrics");
  require_shape(ef.rows() >= 1, "encoded features have no rows");
  require_shape(ef.cols() == p.input_width(),
                "encoded feature width " + std::to_string(ef.cols()) +
                    " does not match head input width " + std::to_string(p.input_width()));
}

/// Q_i = EF W_Q_i, K_i = EF W_K_i, V_i = EF W_V_i (no bias).
template <typename Scalar>
Projection<Scalar> project(const Mat<Scalar>& ef, const MetricProjectionSet<Scalar>& p, Index metric) {
  check_head_input(ef, p);
  if (metric < 0 || metric >= p.metric_count()) {
    throw Error(Errc::IndexOutOfRange, "metric index " + std::to_string(metric) + " out of range");
  }
  const auto i = static_cast<std::size_t>(metric);
  return {ef * p.query[i], ef * p.key[i], ef * p.value[i]};
}

template <typename Scalar>
struct HeadCache {
  std::vector<Projection<Scalar>> projections;     // per metric
  std::vector<std::vector<Mat<Scalar>>> attention; // [i][j] = softmax(Q_i K_j^T / sqrt(d_k))
  std::vector<Mat<Scalar>> summed;                 // M_i = sum_j attention[i][j] V_j
  Mat<Scalar> pooled;                              // M x d_v, row i = mean over rows of M_i
};

/// s_i = r_i . meanpool(sum_j softmax(Q_i K_j^T / sqrt(d_k)) V_j) + b_i
///
/// Every metric's query attends over every metric's keys and values; the
/// outer sum over j is a plain sum, not a softmax.
template <typename Scalar>
Vec<Scalar> cross_metric_scores(const Mat<Scalar>& ef, const MetricProjectionSet<Scalar>& p,
                                HeadCache<Scalar>* cache = nullptr) {
  check_head_input(ef, p);
  const Index m = p.metric_count();
  const auto mm = static_cast<std::size_t>(m);
  const Scalar inv_sqrt_dk = Scalar(1) / std::sqrt(static_cast<Scalar>(p.key_width()));

  HeadCache<Scalar> local;
  HeadCache<Scalar>& c = cache ? *cache : local;
  c.projections.clear();
  for (Index i = 0; i < m; ++i) c.projections.push_back(project(ef, p, i));
  c.attention.assign(mm, std::vector<Mat<Scalar>>(mm));
  c.summed.assign(mm, Mat<Scalar>::Zero(ef.rows(), p.value_width()));
  c.pooled.resize(m, p.value_width());

  Vec<Scalar> scores(m);
  for (std::size_t i = 0; i < mm; ++i) {
    for (std::size_t j = 0; j < mm; ++j) {
      const Mat<Scalar> logits =
          (c.projections[i].query * c.projections[j].key.transpose()) * inv_sqrt_dk;
      c.attention[i][j] = detail::softmax_rows_unchecked(logits);
      c.summed[i].noalias() += c.attention[i][j] * c.projections[j].value;
    }
    c.pooled.row(static_cast<Index>(i)) = c.summed[i].colwise().mean();
    scores(static_cast<Index>(i)) =
        p.readout.row(static_cast<Index>(i)).dot(c.pooled.row(static_cast<Index>(i))) +
        p.bias(static_cast<Index>(i), 0);
  }
  return scores;
}

/// Backpropagates sum_i upstream_i * s_i. Accumulates into `grads` and
/// returns d/dEF.
template <typename Scalar>
Mat<Scalar> head_backward(const Mat<Scalar>& ef, const MetricProjectionSet<Scalar>& p,
                          const HeadCache<Scalar>& c, const Vec<Scalar>& upstream,
                          MetricProjectionSet<Scalar>& grads) {
  const Index m = p.metric_count();
  require_shape(upstream.size() == m, "upstream gradient length must equal metric count");
  const auto mm = static_cast<std::size_t>(m);
  const Index rows = ef.rows();
  const Scalar inv_sqrt_dk = Scalar(1) / std::sqrt(static_cast<Scalar>(p.key_width()));

  std::vector<Mat<Scalar>> dq(mm, Mat<Scalar>::Zero(rows, p.key_width()));
  std::vector<Mat<Scalar>> dk(mm, Mat<Scalar>::Zero(rows, p.key_width()));
  std::vector<Mat<Scalar>> dv(mm, Mat<Scalar>::Zero(rows, p.value_width()));

  for (std::size_t i = 0; i < mm; ++i) {
    const auto ii = static_cast<Index>(i);
    const Scalar g = upstream(ii);
    grads.bias(ii, 0) += g;
    grads.readout.row(ii) += g * c.pooled.row(ii);
    // Mean pooling spreads the readout evenly over rows.
    const RowVec<Scalar> drow = p.readout.row(ii) * (g / static_cast<Scalar>(rows));
    const Mat<Scalar> dsummed = drow.replicate(rows, 1);
    for (std::size_t j = 0; j < mm; ++j) {
      const Mat<Scalar>& probs = c.attention[i][j];
      dv[j].noalias() += probs.transpose() * dsummed;
      const Mat<Scalar> dprobs = dsummed * c.projections[j].value.transpose();
      const Mat<Scalar> dlogits = row_softmax_backward(probs, dprobs) * inv_sqrt_dk;
      dq[i].noalias() += dlogits * c.projections[j].key;
      dk[j].noalias() += dlogits.transpose() * c.projections[i].query;
    }
  }

  Mat<Scalar> d_ef = Mat<Scalar>::Zero(rows, ef.cols());
  for (std::size_t i = 0; i < mm; ++i) {
    grads.query[i].noalias() += ef.transpose() * dq[i];
    grads.key[i].noalias() += ef.transpose() * dk[i];
    grads.value[i].noalias() += ef.transpose() * dv[i];
    d_ef.noalias() += dq[i] * p.query[i].transpose();
    d_ef.noalias() += dk[i] * p.key[i].transpose();
    d_ef.noalias() += dv[i] * p.value[i].transpose();
  }
  return d_ef;
}

template <typename Scalar>
struct HeadGradients {
  MetricProjectionSet<Scalar> weights;
  Mat<Scalar> features;
};

/// Exact gradients of sum_i upstream_i * s_i w.r.t. every head weight and EF.
template <typename Scalar>
HeadGradients<Scalar> head_gradients(const Mat<Scalar>& ef, const MetricProjectionSet<Scalar>& p,
                                     const Vec<Scalar>& upstream) {
  HeadCache<Scalar> cache;
  cross_metric_scores(ef, p, &cache);
  HeadGradients<Scalar> out{MetricProjectionSet<Scalar>::zeros(p.config()), {}};
  out.features = head_backward(ef, p, cache, upstream, out.weights);
  return out;
}

}  // namespace metricforge
