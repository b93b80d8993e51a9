#include "metricforge/evaluation.hpp"

#include "metricforge/features.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace metricforge {
namespace {

using ordered_json = nlohmann::ordered_json;

void check_pair(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error(Errc::LengthMismatch, "vectors differ in length");
  if (x.size() < 2) throw Error(Errc::LengthMismatch, "correlation needs at least two samples");
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i]) || !std::isfinite(y[i])) {
      throw Error(Errc::NonFiniteValues, "correlation input is not finite");
    }
  }
}

ordered_json optional_json(const std::optional<double>& v) {
  return v ? ordered_json(*v) : ordered_json(nullptr);
}

std::string csv_number(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream ss;
  ss.precision(17);
  ss << *v;
  return ss.str();
}

}  // namespace

double plcc(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw Error(Errc::ZeroVariance, "an input has zero variance");
  // sqrt of the product (not the product of roots) makes identical inputs
  // give exactly 1.
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i + 1;
    while (j < order.size() && x[order[j]] == x[order[i]]) ++j;
    // positions i..j-1 hold ranks i+1..j
    const double mean_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = mean_rank;
    i = j;
  }
  return ranks;
}

double srcc(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y);
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return plcc(rx, ry);
}

void PromptRegistry::add(PromptTemplate t) {
  if (t.text.empty()) throw Error(Errc::InvalidArgument, "prompt template text is empty");
  if (contains(t.name)) throw Error(Errc::InvalidArgument, "duplicate prompt template '" + t.name + "'");
  templates_.push_back(std::move(t));
}

bool PromptRegistry::contains(std::string_view name) const noexcept {
  return std::any_of(templates_.begin(), templates_.end(),
                     [&](const PromptTemplate& t) { return t.name == name; });
}

const PromptTemplate& PromptRegistry::find(std::string_view name) const {
  for (const auto& t : templates_) {
    if (t.name == name) return t;
  }
  throw Error(Errc::UnknownTemplate, "no prompt template named '" + std::string(name) + "'");
}

const PromptRegistry& PromptRegistry::builtin() {
  static const PromptRegistry registry = [] {
    PromptRegistry r;
    r.add({"prompt1", "high quality image"});
    r.add({"prompt2", "extremely high quality image, with vivid details"});
    r.add({"prompt3", "extremely high quality image, with high resolution"});
    r.add({"authenticity", "very authentic image"});
    r.add({"child.resolution", "high resolution"});
    r.add({"child.vivid_details", "with vivid details"});
    r.add({"child.no_blur", "without blur"});
    r.add({"child.color_accuracy", "with accurate color"});
    r.add({"child.contrast", "with high contrast"});
    r.add({"child.noise_level", "without noise"});
    return r;
  }();
  return registry;
}

const std::vector<ChildMetric>& default_child_metrics() {
  static const std::vector<ChildMetric> children{
      {"Resolution", "child.resolution"},         {"Vivid Details", "child.vivid_details"},
      {"No Blur", "child.no_blur"},               {"Color Accuracy", "child.color_accuracy"},
      {"Contrast", "child.contrast"},             {"Noise Level", "child.noise_level"},
  };
  return children;
}

double prompt_metric_score(const Model<float>& model, const Mat<float>& image_features,
                           const PromptTemplate& prompt, Index metric, const PromptRegistry& registry) {
  const PromptTemplate& registered = registry.find(prompt.name);
  if (registered.text != prompt.text) {
    throw Error(Errc::UnknownTemplate, "template '" + prompt.name + "' differs from the registry");
  }
  if (metric < 0 || metric >= model.metric_count()) {
    throw Error(Errc::IndexOutOfRange, "metric index out of range");
  }
  FusionInput<float> x{embed_text(prompt.text, image_features.cols()), image_features};
  return static_cast<double>(forward(model, x)(metric));
}

SubmetricReport submetric_ratios(double s_base, const std::vector<std::pair<std::string, double>>& children) {
  if (children.empty()) throw Error(Errc::InvalidArgument, "no child metrics given");
  SubmetricReport report;
  report.s_base = s_base;
  double inv_sum = 0.0;
  for (const auto& [name, score] : children) {
    const double gap = s_base - score;
    if (!(gap > 0.0) || !std::isfinite(gap)) {
      std::ostringstream msg;
      msg << "child '" << name << "' scores " << score << ", not below the base score " << s_base;
      throw Error(Errc::NonPositiveGap, msg.str());
    }
    inv_sum += 1.0 / gap;
    report.entries.push_back({name, score, 0.0});
  }
  for (auto& e : report.entries) e.ratio = (1.0 / (s_base - e.score)) / inv_sum;
  return report;
}

SubmetricReport measure_submetrics(const Model<float>& model, const Manifest& images,
                                   const PromptTemplate& base, const std::vector<ChildMetric>& children,
                                   Index metric, const PromptRegistry& registry) {
  if (images.records.empty()) throw Error(Errc::EmptyManifest, "no images to score");
  std::vector<Mat<float>> feats;
  for (const auto& r : images.records) feats.push_back(load_feature_source(r.feature_ref.image, images.base_dir));
  auto mean_score = [&](const PromptTemplate& t) {
    double sum = 0.0;
    for (const auto& f : feats) sum += prompt_metric_score(model, f, t, metric, registry);
    return sum / static_cast<double>(feats.size());
  };
  const double s_base = mean_score(base);
  std::vector<std::pair<std::string, double>> scored;
  for (const auto& c : children) scored.emplace_back(c.display_name, mean_score(registry.find(c.template_name)));
  return submetric_ratios(s_base, scored);
}

std::vector<MetricCorrelation> correlate(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target,
                                         const std::vector<std::string>& names) {
  std::vector<MetricCorrelation> out;
  for (Index c = 0; c < pred.cols(); ++c) {
    const Eigen::VectorXd p = pred.col(c);
    const Eigen::VectorXd t = target.col(c);
    const std::span<const double> ps(p.data(), static_cast<std::size_t>(p.size()));
    const std::span<const double> ts(t.data(), static_cast<std::size_t>(t.size()));
    MetricCorrelation mc;
    mc.metric = names[static_cast<std::size_t>(c)];
    try {
      mc.plcc = plcc(ps, ts);
      mc.srcc = srcc(ps, ts);
    } catch (const Error& e) {
      mc.plcc.reset();
      mc.srcc.reset();
      mc.status = std::string(errc_name(e.code()));
    }
    out.push_back(std::move(mc));
  }
  return out;
}

EvalReport evaluate_split(const Checkpoint& ckpt, const Manifest& test, const EvalOptions& options) {
  if (test.records.empty()) throw Error(Errc::EmptyManifest, "evaluation manifest has no records");
  for (const auto& name : ckpt.model.metric_names) {
    if (!test.metric_index(name)) {
      throw Error(Errc::MetricNameMismatch, "manifest lacks model metric '" + name + "'");
    }
  }
  const Manifest normalized = normalize_scores(test);
  const PreparedSet data = prepare(normalized, ckpt.model.metric_names, ckpt.text_prompt);
  const Eigen::MatrixXd pred = predict(ckpt.model, data);

  EvalReport report;
  report.split = options.split_name;
  report.samples = data.inputs.size();
  report.seed = ckpt.hyperparams.seed;
  report.provenance = ckpt.provenance;
  report.metrics = correlate(pred, data.targets, ckpt.model.metric_names);
  for (Index r = 0; r < pred.rows(); ++r) {
    for (Index c = 0; c < pred.cols(); ++c) {
      report.scores.push_back({data.sample_ids[static_cast<std::size_t>(r)],
                               ckpt.model.metric_names[static_cast<std::size_t>(c)], pred(r, c),
                               data.targets(r, c)});
    }
  }
  return report;
}

nlohmann::ordered_json to_json(const EvalReport& r) {
  ordered_json j;
  j["split"] = r.split;
  j["samples"] = r.samples;
  j["seed"] = r.seed;
  ordered_json prov = ordered_json::array();
  for (const auto& s : r.provenance) {
    prov.push_back({{"active_metrics", s.active_metrics},
                    {"weighting", s.weighting},
                    {"seed", s.seed},
                    {"dataset_fingerprint", s.dataset_fingerprint},
                    {"epochs", s.epochs}});
  }
  j["provenance"] = std::move(prov);
  ordered_json metrics = ordered_json::array();
  for (const auto& m : r.metrics) {
    metrics.push_back({{"metric", m.metric},
                       {"plcc", optional_json(m.plcc)},
                       {"srcc", optional_json(m.srcc)},
                       {"status", m.status}});
  }
  j["metrics"] = std::move(metrics);
  return j;
}

std::string to_csv(const EvalReport& r) {
  std::ostringstream out;
  out << "split,metric,plcc,srcc,status,samples,seed\n";
  for (const auto& m : r.metrics) {
    out << r.split << ',' << m.metric << ',' << csv_number(m.plcc) << ',' << csv_number(m.srcc) << ','
        << m.status << ',' << r.samples << ',' << r.seed << '\n';
  }
  return out.str();
}

std::string scores_csv(const EvalReport& r) {
  std::ostringstream out;
  out.precision(17);
  out << "sample_id,metric,prediction,target\n";
  for (const auto& s : r.scores) {
    out << s.sample_id << ',' << s.metric << ',' << s.prediction << ',' << s.target << '\n';
  }
  return out.str();
}

nlohmann::ordered_json to_json(const SubmetricReport& r) {
  ordered_json j;
  j["s_base"] = r.s_base;
  ordered_json children = ordered_json::array();
  for (const auto& e : r.entries) {
    children.push_back({{"name", e.name}, {"score", e.score}, {"gap", r.s_base - e.score}, {"ratio", e.ratio}});
  }
  j["children"] = std::move(children);
  return j;
}

std::string to_csv(const SubmetricReport& r) {
  std::ostringstream out;
  out.precision(17);
  out << "name,score,gap,ratio\n";
  for (const auto& e : r.entries) {
    out << e.name << ',' << e.score << ',' << (r.s_base - e.score) << ',' << e.ratio << '\n';
  }
  return out.str();
}

}  // namespace metricforge
