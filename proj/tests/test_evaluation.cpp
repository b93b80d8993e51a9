#include "metricforge/evaluation.hpp"
#include "metricforge/features.hpp"
#include "metricforge/synthetic.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <functional>
#include <map>
#include <sstream>

using namespace metricforge;

namespace {

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an error";
  return Errc::InvalidArgument;
}

using V = std::vector<double>;

const Manifest& desk_set() {
  static const Manifest m = normalize_scores(synthetic_manifest({}));
  return m;
}

HyperParams desk_epochs(int epochs) {
  HyperParams hp = HyperParams::desk();
  hp.epochs = epochs;
  hp.batch_size = 8;
  return hp;
}

/// Trained on quality with the base prompt standing in for every caption.
const Checkpoint& prompt_trained() {
  static const Checkpoint c = [] {
    TrainOptions o;
    o.selection.active_metrics = {"quality"};
    o.text_prompt = PromptRegistry::builtin().find(kBasePromptName).text;
    return fit(desk_set(), HyperParams::desk(), o);
  }();
  return c;
}

const Mat<float>& image_of(const SampleRecord& r) { return std::get<Mat<float>>(r.feature_ref.image); }

}  // namespace

TEST(Correlation, WorkedExamples) {
  EXPECT_DOUBLE_EQ(plcc(V{1, 2, 3}, V{2, 4, 6}), 1.0);
  EXPECT_DOUBLE_EQ(plcc(V{1, 2, 3}, V{3, 2, 1}), -1.0);
  // x = 1..4, y = 1,3,2,4: sxy = 4, sxx = syy = 5
  EXPECT_NEAR(plcc(V{1, 2, 3, 4}, V{1, 3, 2, 4}), 0.8, 1e-15);
  EXPECT_NEAR(srcc(V{1, 2, 3, 4}, V{1, 3, 2, 4}), 0.8, 1e-15);
  EXPECT_EQ(srcc(V{1, 2, 3, 4, 5}, V{1, 8, 27, 64, 125}), 1.0);
  EXPECT_EQ(srcc(V{0.1, 0.5, 0.9}, V{std::exp(0.1), std::exp(0.5), std::exp(0.9)}), 1.0);
}

TEST(Correlation, AverageRanksForTies) {
  EXPECT_EQ(average_ranks(V{10, 20, 20, 5}), V({2, 3.5, 3.5, 1}));
  EXPECT_EQ(average_ranks(V{7, 7, 7}), V({2, 2, 2}));
  const V x{1, 2, 2, 3, 4}, y{3, 1, 2, 5, 5};
  EXPECT_NEAR(srcc(x, y), static_cast<double>(mft::srcc_oracle(x, y)), 1e-12);
}

TEST(Correlation, AgreesWithOracleOnRandomData) {
  SplitMix64 rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.next() % 40;
    V x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = std::round(rng.uniform(0, 8));  // plenty of ties
      y[i] = 0.5 * x[i] + rng.uniform(-3, 3);
    }
    if (mft::counting_ranks(x) == std::vector<long double>(n, mft::counting_ranks(x)[0])) continue;
    EXPECT_NEAR(plcc(x, y), static_cast<double>(mft::plcc_oracle(x, y)), 1e-12);
    EXPECT_NEAR(srcc(x, y), static_cast<double>(mft::srcc_oracle(x, y)), 1e-12);
  }
}

TEST(Correlation, SymmetryAndInvariance) {
  const V x{0.3, 1.7, -2.0, 4.4, 0.1, 2.2}, y{1.0, 2.5, -1.0, 3.0, 0.9, 0.2};
  EXPECT_DOUBLE_EQ(plcc(x, y), plcc(y, x));
  EXPECT_DOUBLE_EQ(srcc(x, y), srcc(y, x));
  V scaled;
  for (double v : x) scaled.push_back(3.0 * v - 7.0);
  EXPECT_NEAR(plcc(scaled, y), plcc(x, y), 1e-14);
  V cubed;
  for (double v : x) cubed.push_back(v * v * v + v);
  EXPECT_EQ(srcc(cubed, y), srcc(x, y));
}

TEST(Correlation, Errors) {
  EXPECT_EQ(code_of([] { plcc(V{1, 2}, V{1, 2, 3}); }), Errc::LengthMismatch);
  EXPECT_EQ(code_of([] { plcc(V{1}, V{1}); }), Errc::LengthMismatch);
  EXPECT_EQ(code_of([] { plcc(V{1, 1, 1}, V{1, 2, 3}); }), Errc::ZeroVariance);
  EXPECT_EQ(code_of([] { srcc(V{1, 2, 3}, V{4, 4, 4}); }), Errc::ZeroVariance);
  EXPECT_EQ(code_of([] { plcc(V{1, std::nan(""), 3}, V{1, 2, 3}); }), Errc::NonFiniteValues);
}

TEST(Prompts, BuiltinRegistry) {
  const auto& r = PromptRegistry::builtin();
  EXPECT_EQ(r.find("prompt1").text, "high quality image");
  EXPECT_EQ(r.find("prompt2").text, "extremely high quality image, with vivid details");
  EXPECT_EQ(r.find("prompt3").text, "extremely high quality image, with high resolution");
  EXPECT_EQ(r.find("authenticity").text, "very authentic image");
  ASSERT_EQ(default_child_metrics().size(), 6u);
  for (const auto& c : default_child_metrics()) EXPECT_TRUE(r.contains(c.template_name)) << c.display_name;
  EXPECT_EQ(default_child_metrics()[2].display_name, "No Blur");
  EXPECT_EQ(code_of([&] { r.find("prompt9"); }), Errc::UnknownTemplate);

  PromptRegistry local;
  local.add({"mine", "a crisp photo"});
  EXPECT_EQ(code_of([&] { local.add({"mine", "again"}); }), Errc::InvalidArgument);
  EXPECT_EQ(code_of([&] { local.add({"blank", ""}); }), Errc::InvalidArgument);
}

TEST(Prompts, ScoreIsDeterministicAndRegistered) {
  const auto& ckpt = prompt_trained();
  const Mat<float>& image = image_of(desk_set().records[0]);
  const auto& base = PromptRegistry::builtin().find(kBasePromptName);
  EXPECT_EQ(prompt_metric_score(ckpt.model, image, base), prompt_metric_score(ckpt.model, image, base));
  EXPECT_EQ(code_of([&] { prompt_metric_score(ckpt.model, image, {"prompt2", "something else"}); }),
            Errc::UnknownTemplate);
  const auto& other = PromptRegistry::builtin().find("prompt1");
  EXPECT_NE(prompt_metric_score(ckpt.model, image, base), prompt_metric_score(ckpt.model, image, other));
}

TEST(Prompts, TrainedQualityPromptRanksImages) {
  const auto& ckpt = prompt_trained();
  const auto& base = PromptRegistry::builtin().find(kBasePromptName);
  V scores, labels;
  for (const auto& r : desk_set().records) {
    scores.push_back(prompt_metric_score(ckpt.model, image_of(r), base));
    labels.push_back(r.mos[0]);
  }
  EXPECT_GT(srcc(scores, labels), 0.9);
}

TEST(Submetric, ClosedForm) {
  // gaps 0.5 and 0.25: inverse gaps 2 and 4
  const SubmetricReport r = submetric_ratios(1.0, {{"a", 0.5}, {"b", 0.75}});
  EXPECT_NEAR(r.entries[0].ratio, 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(r.entries[1].ratio, 2.0 / 3.0, 1e-15);
  EXPECT_EQ(r.entries[1].name, "b");
  EXPECT_EQ(r.s_base, 1.0);
}

TEST(Submetric, RandomCasesSumToOneAndOrder) {
  SplitMix64 rng(41);
  for (int trial = 0; trial < 200; ++trial) {
    const double base = rng.uniform(-2, 2);
    std::vector<std::pair<std::string, double>> children;
    const std::size_t n = 1 + rng.next() % 8;
    for (std::size_t i = 0; i < n; ++i) children.emplace_back("c" + std::to_string(i), base - rng.uniform(1e-3, 3));
    const auto r = submetric_ratios(base, children);
    double sum = 0.0;
    for (const auto& e : r.entries) sum += e.ratio;
    EXPECT_NEAR(sum, 1.0, 1e-12);
    // a child closer to the base gets the larger share
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (children[i].second > children[j].second) EXPECT_GT(r.entries[i].ratio, r.entries[j].ratio);
  }
}

TEST(Submetric, Errors) {
  EXPECT_EQ(code_of([] { submetric_ratios(1.0, {{"a", 0.5}, {"b", 1.0}}); }), Errc::NonPositiveGap);
  EXPECT_EQ(code_of([] { submetric_ratios(1.0, {{"a", 1.5}}); }), Errc::NonPositiveGap);
  EXPECT_EQ(code_of([] { submetric_ratios(1.0, {}); }), Errc::InvalidArgument);
}

TEST(Submetric, MeasuredReportMatchesManualScores) {
  const auto& ckpt = prompt_trained();
  const auto& reg = PromptRegistry::builtin();
  const auto& base = reg.find(kBasePromptName);
  const std::vector<ChildMetric> children(default_child_metrics().begin(), default_child_metrics().begin() + 2);
  auto mean_score = [&](const PromptTemplate& p) {
    double s = 0.0;
    for (const auto& r : desk_set().records) s += prompt_metric_score(ckpt.model, image_of(r), p);
    return s / static_cast<double>(desk_set().records.size());
  };
  const double sb = mean_score(base);
  std::vector<std::pair<std::string, double>> manual;
  for (const auto& c : children) manual.emplace_back(c.display_name, mean_score(reg.find(c.template_name)));
  for (const auto& [n, s] : manual) ASSERT_LT(s, sb) << n;
  const auto r = measure_submetrics(ckpt.model, desk_set(), base, children);
  const auto expected = submetric_ratios(sb, manual);
  EXPECT_NEAR(r.s_base, sb, 1e-12);
  for (std::size_t i = 0; i < children.size(); ++i) {
    EXPECT_NEAR(r.entries[i].score, manual[i].second, 1e-12);
    EXPECT_NEAR(r.entries[i].ratio, expected.entries[i].ratio, 1e-12);
  }
}

TEST(Submetric, Serialization) {
  const auto r = submetric_ratios(1.0, {{"Resolution", 0.5}, {"Contrast", 0.75}});
  const auto j = to_json(r);
  EXPECT_EQ(j["children"][1]["name"], "Contrast");
  EXPECT_DOUBLE_EQ(j["children"][0]["gap"].get<double>(), 0.5);
  EXPECT_NE(to_csv(r).find("Resolution"), std::string::npos);
}

TEST(Evaluate, PerfectPredictionsCorrelateExactly) {
  const Eigen::MatrixXd t = (Eigen::MatrixXd(4, 2) << 0.1, 0.9, 0.4, 0.2, 0.3, 0.5, 0.8, 0.7).finished();
  const auto c = correlate(t, t, {"quality", "alignment"});
  for (const auto& m : c) {
    EXPECT_EQ(m.status, "ok");
    EXPECT_NEAR(*m.plcc, 1.0, 1e-15);
    EXPECT_EQ(*m.srcc, 1.0);
  }
}

TEST(Evaluate, ConstantModelIsUndefined) {
  Checkpoint c = fit(desk_set(), desk_epochs(0), [] {
    TrainOptions o;
    o.selection.active_metrics = default_metric_names();
    return o;
  }());
  c.model = c.model.zeros_like();
  const EvalReport r = evaluate_split(c, desk_set());
  for (const auto& m : r.metrics) {
    EXPECT_FALSE(m.plcc.has_value());
    EXPECT_EQ(m.status, "ZeroVariance");
  }
  EXPECT_TRUE(to_json(r)["metrics"][0]["plcc"].is_null());
}

TEST(Evaluate, ScoreDumpReproducesReport) {
  TrainOptions o;
  o.selection.active_metrics = default_metric_names();
  const Checkpoint c = fit(desk_set(), desk_epochs(10), o);
  const Manifest raw = synthetic_manifest({});
  const EvalReport r = evaluate_split(c, raw, {"holdout"});
  EXPECT_EQ(r.split, "holdout");
  EXPECT_EQ(r.samples, raw.records.size());
  std::istringstream csv(scores_csv(r));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "sample_id,metric,prediction,target");
  std::map<std::string, std::pair<V, V>> by_metric;
  while (std::getline(csv, line)) {
    std::istringstream row(line);
    std::string id, metric, p, t;
    std::getline(row, id, ',');
    std::getline(row, metric, ',');
    std::getline(row, p, ',');
    std::getline(row, t, ',');
    by_metric[metric].first.push_back(std::stod(p));
    by_metric[metric].second.push_back(std::stod(t));
  }
  ASSERT_EQ(r.metrics.size(), 3u);
  for (const auto& m : r.metrics) {
    const auto& [p, t] = by_metric.at(m.metric);
    ASSERT_TRUE(m.plcc.has_value());
    EXPECT_NEAR(plcc(p, t), *m.plcc, 1e-12);
    EXPECT_NEAR(srcc(p, t), *m.srcc, 1e-12);
    // targets are normalized MOS
    for (double v : t) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
  }
  EXPECT_EQ(to_json(evaluate_split(c, raw, {"holdout"})).dump(), to_json(r).dump());
  EXPECT_EQ(to_csv(evaluate_split(c, raw, {"holdout"})), to_csv(r));
}

TEST(Evaluate, Errors) {
  TrainOptions o;
  o.selection.active_metrics = default_metric_names();
  const Checkpoint c = fit(desk_set(), desk_epochs(0), o);
  Manifest empty = desk_set();
  empty.records.clear();
  EXPECT_EQ(code_of([&] { evaluate_split(c, empty); }), Errc::EmptyManifest);
  Checkpoint renamed = c;
  renamed.model.metric_names[1] = "sharpness";
  EXPECT_EQ(code_of([&] { evaluate_split(renamed, desk_set()); }), Errc::MetricNameMismatch);
}
