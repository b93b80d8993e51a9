#pragma once

#include "metricforge/common.hpp"

#include <cmath>
#include <limits>

namespace metricforge {

namespace detail {

// Softmax along rows. Entries equal to -inf get probability 0; every row
// must hold at least one finite entry.
template <typename Scalar>
Mat<Scalar> softmax_rows_unchecked(const Mat<Scalar>& logits) {
  Mat<Scalar> out(logits.rows(), logits.cols());
  for (Index r = 0; r < logits.rows(); ++r) {
    const Scalar peak = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - peak).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

}  // namespace detail

/// Row-wise softmax with max subtraction. Rejects non-finite logits.
template <typename Scalar>
Mat<Scalar> row_softmax(const Mat<Scalar>& logits) {
  require_finite(logits, "softmax logits");
  return detail::softmax_rows_unchecked(logits);
}

/// Softmax where columns at index >= `valid_cols` are padding: their logits
/// are forced to -inf, so they receive exactly zero probability.
template <typename Scalar>
Mat<Scalar> masked_row_softmax(Mat<Scalar> logits, Index valid_cols) {
  if (valid_cols < logits.cols()) {
    logits.rightCols(logits.cols() - valid_cols).setConstant(
        -std::numeric_limits<Scalar>::infinity());
  }
  return detail::softmax_rows_unchecked(logits);
}

/// Backward of row softmax: dZ = P .* (dP - rowsum(P .* dP)).
template <typename Scalar>
Mat<Scalar> row_softmax_backward(const Mat<Scalar>& probs, const Mat<Scalar>& dprobs) {
  const Vec<Scalar> inner = probs.cwiseProduct(dprobs).rowwise().sum();
  return probs.cwiseProduct(dprobs - inner.replicate(1, probs.cols()));
}

// Tanh-form GELU.
template <typename Scalar>
Scalar gelu(Scalar x) {
  const Scalar c = static_cast<Scalar>(0.7978845608028654);  // sqrt(2/pi)
  const Scalar k = static_cast<Scalar>(0.044715);
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(c * (x + k * x * x * x)));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
  const Scalar c = static_cast<Scalar>(0.7978845608028654);
  const Scalar k = static_cast<Scalar>(0.044715);
  const Scalar t = std::tanh(c * (x + k * x * x * x));
  return Scalar(0.5) * (Scalar(1) + t) +
         Scalar(0.5) * x * (Scalar(1) - t * t) * c * (Scalar(1) + Scalar(3) * k * x * x);
}

template <typename Scalar>
struct LayerNormCache {
  Mat<Scalar> normalized;   // xhat
  Vec<Scalar> inv_std;      // per row
};

inline constexpr double kLayerNormEps = 1e-5;

/// Per-row layer norm: y = (x - mean) / sqrt(var + eps) * gain + shift.
template <typename Scalar>
Mat<Scalar> layer_norm(const Mat<Scalar>& x, const RowVec<Scalar>& gain, const RowVec<Scalar>& shift,
                       LayerNormCache<Scalar>* cache = nullptr) {
  const Index n = x.rows();
  const auto width = static_cast<Scalar>(x.cols());
  Mat<Scalar> xhat(n, x.cols());
  Vec<Scalar> inv_std(n);
  for (Index r = 0; r < n; ++r) {
    const Scalar mean = x.row(r).sum() / width;
    const RowVec<Scalar> centered = x.row(r).array() - mean;
    const Scalar var = centered.squaredNorm() / width;
    inv_std(r) = Scalar(1) / std::sqrt(var + static_cast<Scalar>(kLayerNormEps));
    xhat.row(r) = centered * inv_std(r);
  }
  Mat<Scalar> y = (xhat.array().rowwise() * gain.array()).matrix();
  y.rowwise() += shift;
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

/// Returns dx; accumulates dgain and dshift.
template <typename Scalar>
Mat<Scalar> layer_norm_backward(const Mat<Scalar>& dy, const RowVec<Scalar>& gain,
                                const LayerNormCache<Scalar>& cache, RowVec<Scalar>& dgain,
                                RowVec<Scalar>& dshift) {
  const Mat<Scalar>& xhat = cache.normalized;
  dgain += dy.cwiseProduct(xhat).colwise().sum();
  dshift += dy.colwise().sum();
  const Mat<Scalar> dxhat = (dy.array().rowwise() * gain.array()).matrix();
  const auto width = static_cast<Scalar>(dy.cols());
  Mat<Scalar> dx(dy.rows(), dy.cols());
  for (Index r = 0; r < dy.rows(); ++r) {
    const Scalar mean_d = dxhat.row(r).sum() / width;
    const Scalar mean_dx = dxhat.row(r).dot(xhat.row(r)) / width;
    dx.row(r) = cache.inv_std(r) * (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx).matrix();
  }
  return dx;
}

}  // namespace metricforge
