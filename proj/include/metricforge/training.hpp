#pragma once

#include "metricforge/dataset.hpp"
#include "metricforge/model.hpp"

#include <Eigen/Dense>

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace metricforge {

struct HyperParams {
  int epochs = 200;
  int batch_size = 32;
  double learning_rate = 5e-6;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 42;

  /// Table settings for fine-tuning on the two reference datasets.
  static HyperParams agiqa3k() { return {10, 32, 5e-6, 0.9, 0.999, 1e-8, 42}; }
  static HyperParams aigciqa2023() { return {50, 32, 5e-6, 0.9, 0.999, 1e-8, 42}; }

  /// Same Adam betas, epsilon and batch size, with a learning rate that can
  /// move a randomly initialized desk-scale model within a few hundred steps.
  static HyperParams desk() { return {200, 32, 1e-2, 0.9, 0.999, 1e-8, 42}; }
};

void validate(const HyperParams& hp);

struct LossWeights {
  Eigen::VectorXd alpha;
};

struct TaskSelector {
  std::vector<std::string> active_metrics;
};

enum class Weighting { Static, Dynamic };

std::string_view weighting_name(Weighting w) noexcept;
Weighting parse_weighting(std::string_view name);

struct MseLoss {
  double total = 0.0;           // unweighted mean over selected metrics
  Eigen::VectorXd per_metric;   // every metric, selected or not
};

/// Column indices of the selected metrics. Throws EmptySelection or
/// MetricNameMismatch.
std::vector<Index> resolve_selection(const TaskSelector& sel, const std::vector<std::string>& names);

/// pred and target are (batch x M).
MseLoss mse_loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target,
                 const std::vector<Index>& selected);

/// alpha'_i = prev_i * loss_i / sum_j prev_j * loss_j
LossWeights dynamic_weight_update(const LossWeights& prev, const Eigen::VectorXd& losses);

/// sum_i alpha_i * loss_i
double weighted_total_loss(const Eigen::VectorXd& per_metric, const LossWeights& w);

LossWeights uniform_weights(Index metrics, const std::vector<Index>& selected);

/// Draws positive weights on the selected metrics and normalizes them.
LossWeights random_weights(Index metrics, const std::vector<Index>& selected, std::uint64_t seed);

/// Architecture knobs; the input width comes from the data.
struct ModelShape {
  Index width = 12;
  Index seq_len = 8;
  Index heads = 3;
  Index layers = 1;
  Index ffn_width = 0;
  Index key_width = 0;    // 0 selects width / metrics
  Index value_width = 0;  // 0 selects width / metrics
};

struct EpochRecord {
  int epoch = 0;
  Eigen::VectorXd per_metric;  // mean of batch losses over the epoch
  double total = 0.0;
  Eigen::VectorXd alpha;       // loss weights at the end of the epoch
};

struct Stage {
  std::vector<std::string> active_metrics;
  std::string weighting;
  std::uint64_t seed = 0;
  std::string dataset_fingerprint;
  int epochs = 0;
};

struct AdamState {
  long step = 0;
  Model<float> first;   // moment estimates shaped like the model
  Model<float> second;
};

AdamState fresh_adam_state(const Model<float>& model);

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  int version = kCheckpointVersion;
  Model<float> model;
  AdamState optimizer;
  HyperParams hyperparams;
  bool freeze_encoder = false;
  std::optional<std::string> text_prompt;  // fixed prompt used for prompt-design training
  std::vector<EpochRecord> history;
  std::vector<Stage> provenance;
};

struct TrainOptions {
  TaskSelector selection;
  Weighting weighting = Weighting::Static;
  bool freeze_encoder = false;
  ModelShape shape;
  /// Metrics the head outputs; empty means every manifest metric.
  std::vector<std::string> model_metrics;
  /// When set, every record is scored against this text instead of its prompt.
  std::optional<std::string> text_prompt;
  /// Called after every epoch with the checkpoint so far.
  std::function<void(const Checkpoint&)> on_epoch;
};

/// Features and normalized targets resolved once per training run.
struct PreparedSet {
  std::vector<std::string> sample_ids;
  std::vector<FusionInput<float>> inputs;
  Eigen::MatrixXd targets;  // N x model metrics
};

PreparedSet prepare(const Manifest& m, const std::vector<std::string>& metrics,
                    const std::optional<std::string>& text_prompt);

Eigen::MatrixXd predict(const Model<float>& model, const PreparedSet& data);

/// Per-metric MSE of the model over a whole prepared set.
MseLoss dataset_loss(const Model<float>& model, const PreparedSet& data,
                     const std::vector<Index>& selected);

Checkpoint fit(const Manifest& train, const HyperParams& hp, const TrainOptions& options);

/// Loads weights (not optimizer state) from `ckpt` and trains on the new
/// selection, appending a provenance stage.
Checkpoint second_training(const Checkpoint& ckpt, const Manifest& train, const HyperParams& hp,
                           const TrainOptions& options);

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// CSV: epoch, loss_<metric>..., total, alpha_<metric>...
std::string history_csv(const Checkpoint& c);

}  // namespace metricforge
