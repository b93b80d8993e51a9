#include "metricforge/training.hpp"

#include "metricforge/features.hpp"
#include "metricforge/rng.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <sstream>

namespace metricforge {
namespace {

constexpr std::uint64_t kEncoderStream = 0;
constexpr std::uint64_t kHeadStream = 1;
constexpr std::uint64_t kBatchStream = 2;
constexpr std::uint64_t kAlphaStream = 3;

// Smallest loss fed to the reweighting rule; a batch fitted exactly would
// otherwise violate its strictly-positive precondition.
constexpr double kLossFloor = 1e-30;

std::vector<Index> model_columns(const Manifest& m, const std::vector<std::string>& metrics) {
  std::vector<Index> cols;
  for (const auto& name : metrics) {
    auto idx = m.metric_index(name);
    if (!idx) throw Error(Errc::MetricNameMismatch, "manifest has no metric '" + name + "'");
    cols.push_back(static_cast<Index>(*idx));
  }
  return cols;
}

void adam_step(Model<float>& model, const Model<float>& grads, AdamState& state, const HyperParams& hp,
               bool freeze_encoder) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const auto b1 = static_cast<float>(hp.adam_beta1);
  const auto b2 = static_cast<float>(hp.adam_beta2);
  const auto c1 = static_cast<float>(1.0 - std::pow(hp.adam_beta1, t));
  const auto c2 = static_cast<float>(1.0 - std::pow(hp.adam_beta2, t));
  const auto lr = static_cast<float>(hp.learning_rate);
  const auto eps = static_cast<float>(hp.adam_eps);
  visit_model_params(
      [&](const std::string& name, auto& p, const auto& g, auto& m, auto& v) {
        if (freeze_encoder && name.starts_with("encoder.")) return;
        m = b1 * m + (1.0f - b1) * g;
        v = (b2 * v.array() + (1.0f - b2) * g.array().square()).matrix();
        p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
      },
      model, grads, state.first, state.second);
}

void zero_grads(Model<float>& g) {
  visit_model_params([](const std::string&, auto& p) { p.setZero(); }, g);
}

Checkpoint run_training(Checkpoint ckpt, const PreparedSet& data, const HyperParams& hp,
                        const TrainOptions& options, const std::vector<Index>& selected,
                        const std::string& fingerprint) {
  const auto n = static_cast<Index>(data.inputs.size());
  const Index metrics = ckpt.model.metric_count();
  const auto batch = static_cast<Index>(hp.batch_size);
  if (n == 0) throw Error(Errc::EmptyManifest, "training manifest has no records");
  if (batch > n) {
    throw Error(Errc::BatchTooLarge, "batch_size " + std::to_string(batch) + " exceeds " +
                                         std::to_string(n) + " records");
  }

  LossWeights weights = options.weighting == Weighting::Dynamic
                            ? random_weights(metrics, selected, derive_seed(hp.seed, kAlphaStream))
                            : uniform_weights(metrics, selected);

  SplitMix64 batch_rng(derive_seed(hp.seed, kBatchStream));
  std::vector<Index> order(static_cast<std::size_t>(n));
  Model<float> grads = ckpt.model.zeros_like();
  ForwardCache<float> cache;
  const int first_epoch = ckpt.history.empty() ? 1 : ckpt.history.back().epoch + 1;

  for (int e = 0; e < hp.epochs; ++e) {
    for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    fisher_yates(std::span<Index>(order), batch_rng);

    Eigen::VectorXd epoch_loss = Eigen::VectorXd::Zero(metrics);
    double epoch_total = 0.0;
    int batches = 0;
    for (Index start = 0; start < n; start += batch) {
      const Index size = std::min(batch, n - start);
      zero_grads(grads);
      Eigen::VectorXd sq = Eigen::VectorXd::Zero(metrics);
      for (Index k = 0; k < size; ++k) {
        const Index idx = order[static_cast<std::size_t>(start + k)];
        const auto& x = data.inputs[static_cast<std::size_t>(idx)];
        Vec<float> pred;
        try {
          pred = forward(ckpt.model, x, &cache);
        } catch (const Error& err) {
          if (err.code() != Errc::NonFiniteValues) throw;
          throw Error(Errc::TrainingDiverged,
                      "non-finite activations at epoch " + std::to_string(first_epoch + e) + ": " + err.what());
        }
        const Eigen::VectorXd delta = pred.cast<double>() - data.targets.row(idx).transpose();
        sq += delta.cwiseAbs2();
        // d/ds of sum_i alpha_i * mean_b (s_i - t_i)^2
        const Vec<float> upstream =
            (weights.alpha.cwiseProduct(delta) * (2.0 / static_cast<double>(size))).cast<float>();
        backward(ckpt.model, x, cache, upstream, grads, options.freeze_encoder);
      }
      const Eigen::VectorXd batch_loss = sq / static_cast<double>(size);
      const double total = weighted_total_loss(batch_loss, weights);
      if (!std::isfinite(total)) {
        throw Error(Errc::TrainingDiverged,
                    "non-finite loss at epoch " + std::to_string(first_epoch + e));
      }
      adam_step(ckpt.model, grads, ckpt.optimizer, hp, options.freeze_encoder);
      bool params_finite = true;
      visit_model_params([&](const std::string&, const auto& p) { params_finite &= p.allFinite(); },
                         ckpt.model);
      if (!params_finite) {
        throw Error(Errc::TrainingDiverged,
                    "non-finite parameters at epoch " + std::to_string(first_epoch + e));
      }
      epoch_loss += batch_loss;
      epoch_total += total;
      ++batches;
      if (options.weighting == Weighting::Dynamic) {
        weights = dynamic_weight_update(weights, batch_loss.cwiseMax(kLossFloor));
      }
    }
    ckpt.history.push_back({first_epoch + e, epoch_loss / batches, epoch_total / batches, weights.alpha});
    if (options.on_epoch) options.on_epoch(ckpt);
  }

  Stage stage;
  for (Index i : selected) stage.active_metrics.push_back(ckpt.model.metric_names[static_cast<std::size_t>(i)]);
  stage.weighting = std::string(weighting_name(options.weighting));
  stage.seed = hp.seed;
  stage.dataset_fingerprint = fingerprint;
  stage.epochs = hp.epochs;
  ckpt.provenance.push_back(std::move(stage));
  ckpt.hyperparams = hp;
  return ckpt;
}

}  // namespace

void validate(const HyperParams& hp) {
  if (hp.epochs < 0 || hp.batch_size < 1 || !(hp.learning_rate > 0.0) || !(hp.adam_eps > 0.0)) {
    throw Error(Errc::InvalidConfig, "hyperparameters must be positive");
  }
  if (!(hp.adam_beta1 > 0.0 && hp.adam_beta1 < 1.0) || !(hp.adam_beta2 > 0.0 && hp.adam_beta2 < 1.0)) {
    throw Error(Errc::InvalidConfig, "Adam betas must lie in (0, 1)");
  }
}

std::string_view weighting_name(Weighting w) noexcept {
  return w == Weighting::Dynamic ? "dynamic" : "static";
}

Weighting parse_weighting(std::string_view name) {
  if (name == "static") return Weighting::Static;
  if (name == "dynamic") return Weighting::Dynamic;
  throw Error(Errc::InvalidConfig, "weighting must be 'static' or 'dynamic'");
}

std::vector<Index> resolve_selection(const TaskSelector& sel, const std::vector<std::string>& names) {
  if (sel.active_metrics.empty()) throw Error(Errc::EmptySelection, "no active metrics selected");
  std::vector<Index> out;
  for (const auto& m : sel.active_metrics) {
    Index found = -1;
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == m) found = static_cast<Index>(i);
    }
    if (found < 0) throw Error(Errc::MetricNameMismatch, "unknown metric '" + m + "'");
    if (std::find(out.begin(), out.end(), found) == out.end()) out.push_back(found);
  }
  std::sort(out.begin(), out.end());
  return out;
}

MseLoss mse_loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target,
                 const std::vector<Index>& selected) {
  if (selected.empty()) throw Error(Errc::EmptySelection, "no active metrics selected");
  if (pred.rows() != target.rows() || pred.cols() != target.cols() || pred.rows() == 0) {
    throw Error(Errc::LengthMismatch, "prediction and target shapes differ");
  }
  require_finite(pred, "predictions");
  require_finite(target, "targets");
  MseLoss out;
  out.per_metric = (pred - target).cwiseAbs2().colwise().mean().transpose();
  for (Index i : selected) {
    if (i < 0 || i >= pred.cols()) throw Error(Errc::IndexOutOfRange, "selected metric out of range");
    out.total += out.per_metric(i);
  }
  out.total /= static_cast<double>(selected.size());
  return out;
}

LossWeights dynamic_weight_update(const LossWeights& prev, const Eigen::VectorXd& losses) {
  if (prev.alpha.size() != losses.size()) {
    throw Error(Errc::LengthMismatch, "loss weights and losses differ in length");
  }
  if (!losses.allFinite() || (losses.array() <= 0.0).any()) {
    throw Error(Errc::NonPositiveLoss, "dynamic reweighting needs strictly positive losses");
  }
  const Eigen::VectorXd scaled = prev.alpha.cwiseProduct(losses);
  const double denom = scaled.sum();
  if (!(denom > 0.0) || !std::isfinite(denom)) {
    throw Error(Errc::DegenerateDenominator, "sum of weighted losses is not positive");
  }
  return {scaled / denom};
}

double weighted_total_loss(const Eigen::VectorXd& per_metric, const LossWeights& w) {
  if (per_metric.size() != w.alpha.size()) {
    throw Error(Errc::LengthMismatch, "loss vector and weights differ in length");
  }
  return w.alpha.dot(per_metric);
}

LossWeights uniform_weights(Index metrics, const std::vector<Index>& selected) {
  if (selected.empty()) throw Error(Errc::EmptySelection, "no active metrics selected");
  Eigen::VectorXd a = Eigen::VectorXd::Zero(metrics);
  for (Index i : selected) a(i) = 1.0 / static_cast<double>(selected.size());
  return {a};
}

LossWeights random_weights(Index metrics, const std::vector<Index>& selected, std::uint64_t seed) {
  if (selected.empty()) throw Error(Errc::EmptySelection, "no active metrics selected");
  SplitMix64 rng(seed);
  Eigen::VectorXd a = Eigen::VectorXd::Zero(metrics);
  // Bounded away from zero so no metric starts absorbed.
  for (Index i : selected) a(i) = rng.uniform(0.1, 1.0);
  return {a / a.sum()};
}

AdamState fresh_adam_state(const Model<float>& model) {
  return {0, model.zeros_like(), model.zeros_like()};
}

PreparedSet prepare(const Manifest& m, const std::vector<std::string>& metrics,
                    const std::optional<std::string>& text_prompt) {
  const auto cols = model_columns(m, metrics);
  PreparedSet out;
  out.targets.resize(static_cast<Index>(m.records.size()), static_cast<Index>(cols.size()));
  for (std::size_t r = 0; r < m.records.size(); ++r) {
    const auto& rec = m.records[r];
    out.sample_ids.push_back(rec.sample_id);
    out.inputs.push_back(resolve_features(
        rec, m.base_dir,
        text_prompt ? std::optional<std::string_view>(*text_prompt) : std::nullopt));
    for (std::size_t c = 0; c < cols.size(); ++c) {
      out.targets(static_cast<Index>(r), static_cast<Index>(c)) = rec.mos[static_cast<std::size_t>(cols[c])];
    }
  }
  return out;
}

Eigen::MatrixXd predict(const Model<float>& model, const PreparedSet& data) {
  Eigen::MatrixXd out(static_cast<Index>(data.inputs.size()), model.metric_count());
  for (std::size_t i = 0; i < data.inputs.size(); ++i) {
    out.row(static_cast<Index>(i)) = forward(model, data.inputs[i]).cast<double>().transpose();
  }
  return out;
}

MseLoss dataset_loss(const Model<float>& model, const PreparedSet& data,
                     const std::vector<Index>& selected) {
  return mse_loss(predict(model, data), data.targets, selected);
}

Checkpoint fit(const Manifest& train, const HyperParams& hp, const TrainOptions& options) {
  validate(hp);
  if (train.records.empty()) throw Error(Errc::EmptyManifest, "training manifest has no records");
  if (!train.is_normalized()) {
    throw Error(Errc::InvalidArgument, "training manifest must be normalized to [0, 1]");
  }
  const std::vector<std::string> metrics =
      options.model_metrics.empty() ? train.metric_names : options.model_metrics;
  const auto selected = resolve_selection(options.selection, metrics);
  if (static_cast<std::size_t>(hp.batch_size) > train.records.size()) {
    throw Error(Errc::BatchTooLarge, "batch_size exceeds record count");
  }
  PreparedSet data = prepare(train, metrics, options.text_prompt);

  const ModelShape& s = options.shape;
  const auto m = static_cast<Index>(metrics.size());
  EncoderConfig enc{data.inputs.front().image.cols(), s.width,     s.seq_len,
                    s.heads,                          s.layers,    s.ffn_width,
                    derive_seed(hp.seed, kEncoderStream)};
  HeadConfig head{m, s.width, s.key_width > 0 ? s.key_width : s.width / m,
                  s.value_width > 0 ? s.value_width : s.width / m, derive_seed(hp.seed, kHeadStream)};

  Checkpoint ckpt;
  ckpt.model = init_model<float>(enc, head, metrics);
  ckpt.optimizer = fresh_adam_state(ckpt.model);
  ckpt.freeze_encoder = options.freeze_encoder;
  ckpt.text_prompt = options.text_prompt;
  return run_training(std::move(ckpt), data, hp, options, selected, manifest_fingerprint(train));
}

Checkpoint second_training(const Checkpoint& ckpt, const Manifest& train, const HyperParams& hp,
                           const TrainOptions& options) {
  validate(hp);
  if (ckpt.version != kCheckpointVersion) {
    throw Error(Errc::VersionMismatch, "checkpoint version " + std::to_string(ckpt.version));
  }
  if (ckpt.model.metric_names.size() != static_cast<std::size_t>(ckpt.model.metric_count())) {
    throw Error(Errc::CorruptCheckpoint, "checkpoint metric names do not match its head");
  }
  if (train.records.empty()) throw Error(Errc::EmptyManifest, "training manifest has no records");
  if (!train.is_normalized()) {
    throw Error(Errc::InvalidArgument, "training manifest must be normalized to [0, 1]");
  }
  const auto selected = resolve_selection(options.selection, ckpt.model.metric_names);
  if (!ckpt.provenance.empty()) {
    auto prev = ckpt.provenance.back().active_metrics;
    auto next = options.selection.active_metrics;
    std::sort(prev.begin(), prev.end());
    std::sort(next.begin(), next.end());
    if (prev == next) {
      std::clog << "warning: second training uses the same metric selection as the previous stage\n";
    }
  }
  if (static_cast<std::size_t>(hp.batch_size) > train.records.size()) {
    throw Error(Errc::BatchTooLarge, "batch_size exceeds record count");
  }

  Checkpoint next = ckpt;
  next.optimizer = fresh_adam_state(next.model);
  next.freeze_encoder = options.freeze_encoder;
  if (options.text_prompt) next.text_prompt = options.text_prompt;
  const PreparedSet data = prepare(train, next.model.metric_names, next.text_prompt);
  if (data.inputs.front().image.cols() != next.model.encoder.config.input_width) {
    throw Error(Errc::ShapeMismatch, "feature width differs from the checkpoint's encoder");
  }
  return run_training(std::move(next), data, hp, options, selected, manifest_fingerprint(train));
}

std::string history_csv(const Checkpoint& c) {
  std::ostringstream out;
  out.precision(17);
  const auto& names = c.model.metric_names;
  out << "epoch";
  for (const auto& n : names) out << ",loss_" << n;
  out << ",total";
  for (const auto& n : names) out << ",alpha_" << n;
  out << '\n';
  for (const auto& r : c.history) {
    out << r.epoch;
    for (Index i = 0; i < r.per_metric.size(); ++i) out << ',' << r.per_metric(i);
    out << ',' << r.total;
    for (Index i = 0; i < r.alpha.size(); ++i) out << ',' << r.alpha(i);
    out << '\n';
  }
  return out.str();
}

}  // namespace metricforge
