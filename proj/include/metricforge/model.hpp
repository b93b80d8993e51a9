#pragma once

#include "metricforge/encoder.hpp"
#include "metricforge/metric_head.hpp"

#include <string>
#include <vector>

namespace metricforge {

/// Fusion encoder followed by the Metric Transformer head.
template <typename Scalar>
struct Model {
  EncoderWeights<Scalar> encoder;
  MetricProjectionSet<Scalar> head;
  std::vector<std::string> metric_names;

  Index metric_count() const noexcept { return head.metric_count(); }

  Model zeros_like() const {
    return {EncoderWeights<Scalar>::zeros(encoder.config),
            MetricProjectionSet<Scalar>::zeros(head.config()), metric_names};
  }

  template <typename To>
  Model<To> cast() const {
    return {encoder.template cast<To>(), head.template cast<To>(), metric_names};
  }
};

template <typename F, typename... Models>
void visit_model_params(F&& f, Models&... models) {
  visit_encoder_params(f, models.encoder...);
  visit_head_params(f, models.head...);
}

template <typename Scalar>
Model<Scalar> init_model(const EncoderConfig& enc, const HeadConfig& head,
                         std::vector<std::string> metric_names) {
  if (head.width != enc.width) {
    throw Error(Errc::InvalidConfig, "head input width must equal encoder width");
  }
  if (static_cast<Index>(metric_names.size()) != head.metrics) {
    throw Error(Errc::InvalidConfig, "metric_names length must equal head metric count");
  }
  return {init_encoder<Scalar>(enc), init_head<Scalar>(head), std::move(metric_names)};
}

template <typename Scalar>
struct ForwardCache {
  EncoderCache<Scalar> encoder;
  Mat<Scalar> features;
  HeadCache<Scalar> head;
};

template <typename Scalar>
Vec<Scalar> forward(const Model<Scalar>& m, const FusionInput<Scalar>& x,
                    ForwardCache<Scalar>* cache = nullptr) {
  ForwardCache<Scalar> local;
  ForwardCache<Scalar>& c = cache ? *cache : local;
  c.features = encode(m.encoder, x, &c.encoder);
  return cross_metric_scores(c.features, m.head, &c.head);
}

/// Accumulates gradients of sum_i upstream_i * s_i into `grads`. With
/// `freeze_encoder` the encoder gradients are left untouched.
template <typename Scalar>
void backward(const Model<Scalar>& m, const FusionInput<Scalar>& x, const ForwardCache<Scalar>& c,
              const Vec<Scalar>& upstream, Model<Scalar>& grads, bool freeze_encoder = false) {
  const Mat<Scalar> d_ef = head_backward(c.features, m.head, c.head, upstream, grads.head);
  if (!freeze_encoder) encode_backward(m.encoder, x, c.encoder, d_ef, grads.encoder);
}

}  // namespace metricforge
