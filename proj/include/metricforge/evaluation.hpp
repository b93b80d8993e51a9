#pragma once

#include "metricforge/dataset.hpp"
#include "metricforge/training.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace metricforge {

/// Pearson linear correlation. Throws LengthMismatch (unequal or fewer than
/// two samples), NonFiniteValues, or ZeroVariance.
double plcc(std::span<const double> x, std::span<const double> y);

/// 1-based ranks; tied values share the mean of the ranks they span.
std::vector<double> average_ranks(std::span<const double> x);

/// Spearman rank correlation: Pearson correlation of average ranks.
double srcc(std::span<const double> x, std::span<const double> y);

struct PromptTemplate {
  std::string name;
  std::string text;
};

class PromptRegistry {
 public:
  /// Throws InvalidArgument on an empty text or a duplicate name.
  void add(PromptTemplate t);
  const PromptTemplate& find(std::string_view name) const;  // UnknownTemplate
  bool contains(std::string_view name) const noexcept;
  const std::vector<PromptTemplate>& templates() const noexcept { return templates_; }

  /// Quality prompts 1-3, the authenticity prompt, and the six child prompts.
  static const PromptRegistry& builtin();

 private:
  std::vector<PromptTemplate> templates_;
};

struct ChildMetric {
  std::string display_name;
  std::string template_name;
};

/// Resolution, Vivid Details, No Blur, Color Accuracy, Contrast, Noise Level.
const std::vector<ChildMetric>& default_child_metrics();

inline constexpr const char* kBasePromptName = "prompt2";

/// Scores image features against a registered prompt: the prompt text takes
/// the place of the caption, and the head's `metric` output is returned.
double prompt_metric_score(const Model<float>& model, const Mat<float>& image_features,
                           const PromptTemplate& prompt, Index metric = 0,
                           const PromptRegistry& registry = PromptRegistry::builtin());

struct SubmetricEntry {
  std::string name;
  double score = 0.0;
  double ratio = 0.0;
};

struct SubmetricReport {
  double s_base = 0.0;
  std::vector<SubmetricEntry> entries;
};

/// ratio_i = (1 / (S_base - S_i)) / sum_j 1 / (S_base - S_j). Throws
/// NonPositiveGap when any S_i >= S_base.
SubmetricReport submetric_ratios(double s_base, const std::vector<std::pair<std::string, double>>& children);

/// Mean prompt score over every record's image, for the base prompt and each
/// child prompt, fed through submetric_ratios.
SubmetricReport measure_submetrics(const Model<float>& model, const Manifest& images,
                                   const PromptTemplate& base, const std::vector<ChildMetric>& children,
                                   Index metric = 0,
                                   const PromptRegistry& registry = PromptRegistry::builtin());

struct MetricCorrelation {
  std::string metric;
  std::optional<double> plcc;  // empty when undefined
  std::optional<double> srcc;
  std::string status = "ok";   // "ok" or the error name that made it undefined
};

struct ScoreRow {
  std::string sample_id;
  std::string metric;
  double prediction = 0.0;
  double target = 0.0;
};

struct EvalReport {
  std::string split;
  std::size_t samples = 0;
  std::uint64_t seed = 0;
  std::vector<Stage> provenance;
  std::vector<MetricCorrelation> metrics;
  std::vector<ScoreRow> scores;
};

struct EvalOptions {
  std::string split_name = "test";
};

/// Scores every record and correlates predictions with normalized MOS per
/// metric. Throws EmptyManifest or MetricNameMismatch.
EvalReport evaluate_split(const Checkpoint& ckpt, const Manifest& test, const EvalOptions& options = {});

/// Per-metric PLCC/SRCC from predictions and targets (N x M).
std::vector<MetricCorrelation> correlate(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target,
                                         const std::vector<std::string>& names);

nlohmann::ordered_json to_json(const EvalReport& r);
std::string to_csv(const EvalReport& r);
std::string scores_csv(const EvalReport& r);

nlohmann::ordered_json to_json(const SubmetricReport& r);
std::string to_csv(const SubmetricReport& r);

}  // namespace metricforge
