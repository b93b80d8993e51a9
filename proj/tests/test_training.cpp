#include "metricforge/evaluation.hpp"
#include "metricforge/synthetic.hpp"
#include "metricforge/training.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <functional>

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

bool same_weights(const Model<float>& a, const Model<float>& b) {
  bool same = true;
  visit_model_params(
      [&](const std::string&, const auto& x, const auto& y) {
        same &= x.size() == y.size() &&
                std::memcmp(x.data(), y.data(), sizeof(float) * static_cast<std::size_t>(x.size())) == 0;
      },
      a, b);
  return same;
}

const Manifest& desk_set() {
  static const Manifest m = normalize_scores(synthetic_manifest({}));
  return m;
}

TrainOptions all_metrics() {
  TrainOptions o;
  o.selection.active_metrics = default_metric_names();
  return o;
}

HyperParams short_run(int epochs) {
  HyperParams hp = HyperParams::desk();
  hp.epochs = epochs;
  hp.batch_size = 8;
  return hp;
}

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

}  // namespace

TEST(Loss, MseWorkedExample) {
  Eigen::MatrixXd pred(2, 3), target(2, 3);
  pred << 0.5, 0.0, 1.0, 0.25, 1.0, 0.0;
  target << 0.0, 0.0, 1.0, 0.25, 0.5, 1.0;
  const MseLoss l = mse_loss(pred, target, {0, 1, 2});
  EXPECT_DOUBLE_EQ(l.per_metric(0), 0.125);
  EXPECT_DOUBLE_EQ(l.per_metric(1), 0.125);
  EXPECT_DOUBLE_EQ(l.per_metric(2), 0.5);
  EXPECT_DOUBLE_EQ(l.total, 0.75 / 3.0);
  EXPECT_DOUBLE_EQ(mse_loss(pred, target, {2}).total, 0.5);
  EXPECT_EQ(mse_loss(target, target, {0, 1, 2}).total, 0.0);
}

TEST(Loss, Errors) {
  const Eigen::MatrixXd a = Eigen::MatrixXd::Zero(2, 3);
  EXPECT_EQ(code_of([&] { mse_loss(a, a, {}); }), Errc::EmptySelection);
  EXPECT_EQ(code_of([&] { mse_loss(a, Eigen::MatrixXd::Zero(3, 3), {0}); }), Errc::LengthMismatch);
  Eigen::MatrixXd b = a;
  b(1, 1) = std::nan("");
  EXPECT_EQ(code_of([&] { mse_loss(b, a, {0}); }), Errc::NonFiniteValues);
}

TEST(Selection, ResolvesNamesInColumnOrder) {
  const auto names = default_metric_names();
  EXPECT_EQ(resolve_selection({{"authenticity", "quality"}}, names), std::vector<Index>({0, 2}));
  EXPECT_EQ(code_of([&] { resolve_selection({{}}, names); }), Errc::EmptySelection);
  EXPECT_EQ(code_of([&] { resolve_selection({{"sharpness"}}, names); }), Errc::MetricNameMismatch);
}

TEST(DynamicWeights, HandWorkedUpdate) {
  const LossWeights next = dynamic_weight_update({vec({0.5, 0.3, 0.2})}, vec({0.2, 0.1, 0.4}));
  EXPECT_NEAR(next.alpha(0), 10.0 / 21.0, 1e-15);
  EXPECT_NEAR(next.alpha(1), 1.0 / 7.0, 1e-15);
  EXPECT_NEAR(next.alpha(2), 8.0 / 21.0, 1e-15);
  EXPECT_NEAR(next.alpha.sum(), 1.0, 1e-15);
}

TEST(DynamicWeights, EqualLossesAreAFixedPoint) {
  const Eigen::VectorXd a = vec({0.1, 0.6, 0.3});
  EXPECT_TRUE(dynamic_weight_update({a}, Eigen::VectorXd::Constant(3, 0.37)).alpha.isApprox(a, 1e-15));
}

TEST(DynamicWeights, ZeroWeightIsAbsorbing) {
  LossWeights w{vec({0.0, 0.5, 0.5})};
  for (int k = 0; k < 10; ++k) w = dynamic_weight_update(w, vec({5.0, 0.1, 0.2}));
  EXPECT_EQ(w.alpha(0), 0.0);
  EXPECT_NEAR(w.alpha.sum(), 1.0, 1e-12);
}

TEST(DynamicWeights, Errors) {
  EXPECT_EQ(code_of([] { dynamic_weight_update({vec({0.5, 0.5})}, vec({0.0, 1.0})); }), Errc::NonPositiveLoss);
  EXPECT_EQ(code_of([] { dynamic_weight_update({vec({0.5, 0.5})}, vec({-1.0, 1.0})); }), Errc::NonPositiveLoss);
  EXPECT_EQ(code_of([] { dynamic_weight_update({vec({0.0, 0.0})}, vec({1.0, 1.0})); }),
            Errc::DegenerateDenominator);
  EXPECT_EQ(code_of([] { dynamic_weight_update({vec({1.0})}, vec({1.0, 1.0})); }), Errc::LengthMismatch);
}

TEST(DynamicWeights, WeightedTotal) {
  EXPECT_DOUBLE_EQ(weighted_total_loss(vec({0.2, 0.4, 1.0}), {vec({0.5, 0.25, 0.25})}), 0.45);
  const auto u = uniform_weights(3, {0, 2});
  EXPECT_EQ(u.alpha(1), 0.0);
  EXPECT_EQ(u.alpha(0), 0.5);
  const auto r = random_weights(3, {0, 1, 2}, 9);
  EXPECT_NEAR(r.alpha.sum(), 1.0, 1e-15);
  EXPECT_TRUE((r.alpha.array() > 0.0).all());
}

TEST(HyperParams, Presets) {
  EXPECT_EQ(HyperParams::agiqa3k().epochs, 10);
  EXPECT_EQ(HyperParams::aigciqa2023().epochs, 50);
  for (const auto& hp : {HyperParams::agiqa3k(), HyperParams::aigciqa2023()}) {
    EXPECT_EQ(hp.learning_rate, 5e-6);
    EXPECT_EQ(hp.batch_size, 32);
    EXPECT_EQ(hp.adam_beta1, 0.9);
    EXPECT_EQ(hp.adam_beta2, 0.999);
    EXPECT_EQ(hp.adam_eps, 1e-8);
  }
  HyperParams bad = HyperParams::desk();
  bad.adam_beta2 = 1.0;
  EXPECT_EQ(code_of([&] { validate(bad); }), Errc::InvalidConfig);
}

TEST(Fit, RejectsBadInputs) {
  Manifest empty = desk_set();
  empty.records.clear();
  EXPECT_EQ(code_of([&] { fit(empty, short_run(1), all_metrics()); }), Errc::EmptyManifest);
  HyperParams big = short_run(1);
  big.batch_size = 33;
  EXPECT_EQ(code_of([&] { fit(desk_set(), big, all_metrics()); }), Errc::BatchTooLarge);
  EXPECT_EQ(code_of([&] { fit(synthetic_manifest({}), short_run(1), all_metrics()); }), Errc::InvalidArgument);
}

TEST(Fit, DeterministicForFixedSeed) {
  const Checkpoint a = fit(desk_set(), short_run(4), all_metrics());
  const Checkpoint b = fit(desk_set(), short_run(4), all_metrics());
  EXPECT_TRUE(same_weights(a.model, b.model));
  EXPECT_EQ(history_csv(a), history_csv(b));
  HyperParams other = short_run(4);
  other.seed = 43;
  EXPECT_FALSE(same_weights(a.model, fit(desk_set(), other, all_metrics()).model));
  ASSERT_EQ(a.provenance.size(), 1u);
  EXPECT_EQ(a.provenance[0].active_metrics, default_metric_names());
  EXPECT_EQ(a.history.size(), 4u);
  EXPECT_EQ(a.optimizer.step, 16);
}

TEST(Fit, OverfitsSmallSet) {
  const Manifest& m = desk_set();
  const auto metrics = default_metric_names();
  const PreparedSet data = prepare(m, metrics, std::nullopt);
  HyperParams hp = HyperParams::desk();
  hp.epochs = 0;
  const double initial = dataset_loss(fit(m, hp, all_metrics()).model, data, {0, 1, 2}).total;
  const Checkpoint c = fit(m, HyperParams::desk(), all_metrics());
  const Eigen::MatrixXd pred = predict(c.model, data);
  EXPECT_LT(dataset_loss(c.model, data, {0, 1, 2}).total, 0.1 * initial);
  for (Index k = 0; k < 3; ++k) {
    const std::vector<double> p(pred.col(k).data(), pred.col(k).data() + pred.rows());
    const std::vector<double> t(data.targets.col(k).data(), data.targets.col(k).data() + pred.rows());
    EXPECT_GT(plcc(p, t), 0.95) << metrics[static_cast<std::size_t>(k)];
  }
}

TEST(Fit, FrozenEncoderStaysAtInit) {
  TrainOptions o = all_metrics();
  o.freeze_encoder = true;
  const Checkpoint init = fit(desk_set(), short_run(0), o);
  const Checkpoint c = fit(desk_set(), short_run(3), o);
  bool encoder_same = true;
  visit_encoder_params([&](const std::string&, const auto& x, const auto& y) { encoder_same &= x == y; },
                       init.model.encoder, c.model.encoder);
  EXPECT_TRUE(encoder_same);
  EXPECT_FALSE(init.model.head.readout == c.model.head.readout);
}

TEST(Fit, DynamicWeightsStayOnTheSimplex) {
  TrainOptions o = all_metrics();
  o.weighting = Weighting::Dynamic;
  const Checkpoint c = fit(desk_set(), short_run(5), o);
  for (const auto& r : c.history) {
    EXPECT_NEAR(r.alpha.sum(), 1.0, 1e-9);
    EXPECT_TRUE((r.alpha.array() > 0.0).all());
  }
  EXPECT_EQ(c.provenance[0].weighting, "dynamic");
}

TEST(Fit, OnEpochSeesEveryEpoch) {
  TrainOptions o = all_metrics();
  std::vector<int> seen;
  o.on_epoch = [&](const Checkpoint& c) { seen.push_back(c.history.back().epoch); };
  fit(desk_set(), short_run(3), o);
  EXPECT_EQ(seen, std::vector<int>({1, 2, 3}));
}

TEST(SecondTraining, ZeroEpochsKeepWeights) {
  TrainOptions q = all_metrics();
  q.selection.active_metrics = {"quality"};
  const Checkpoint first = fit(desk_set(), short_run(3), q);
  TrainOptions a = all_metrics();
  a.selection.active_metrics = {"alignment"};
  const Checkpoint second = second_training(first, desk_set(), short_run(0), a);
  EXPECT_TRUE(same_weights(first.model, second.model));
  ASSERT_EQ(second.provenance.size(), 2u);
  EXPECT_EQ(second.provenance[0].active_metrics, std::vector<std::string>({"quality"}));
  EXPECT_EQ(second.provenance[1].active_metrics, std::vector<std::string>({"alignment"}));
  EXPECT_EQ(second.optimizer.step, 0);
}

TEST(SecondTraining, ReducesTargetMetricLoss) {
  TrainOptions q = all_metrics();
  q.selection.active_metrics = {"quality"};
  const Checkpoint first = fit(desk_set(), short_run(20), q);
  TrainOptions a = all_metrics();
  a.selection.active_metrics = {"alignment"};
  const Checkpoint second = second_training(first, desk_set(), short_run(20), a);
  const PreparedSet data = prepare(desk_set(), first.model.metric_names, std::nullopt);
  EXPECT_LT(dataset_loss(second.model, data, {1}).total, dataset_loss(first.model, data, {1}).total);
  ASSERT_EQ(second.history.size(), 40u);
  EXPECT_EQ(second.history[20].epoch, 21);
}

TEST(SecondTraining, RejectsMismatches) {
  const Checkpoint c = fit(desk_set(), short_run(0), all_metrics());
  Checkpoint old = c;
  old.version = 0;
  EXPECT_EQ(code_of([&] { second_training(old, desk_set(), short_run(1), all_metrics()); }), Errc::VersionMismatch);
  SyntheticSpec wide;
  wide.input_width = 6;
  EXPECT_EQ(code_of([&] {
              second_training(c, normalize_scores(synthetic_manifest(wide)), short_run(1), all_metrics());
            }),
            Errc::ShapeMismatch);
  TrainOptions none = all_metrics();
  none.selection.active_metrics = {"sharpness"};
  EXPECT_EQ(code_of([&] { second_training(c, desk_set(), short_run(1), none); }), Errc::MetricNameMismatch);
}
