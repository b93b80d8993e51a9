#include "metricforge/synthetic.hpp"

#include "metricforge/features.hpp"
#include "metricforge/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <set>

namespace metricforge {
namespace {

constexpr std::array<const char*, 24> kWords{
    "castle", "forest", "robot",  "river",  "portrait", "neon",  "desert", "ocean",
    "dragon", "city",   "garden", "winter", "sunset",   "train", "violin", "mountain",
    "cat",    "galaxy", "market", "bridge", "lantern",  "storm", "temple", "flower"};

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Eigen::VectorXd uniform_vector(SplitMix64& rng, Index n) {
  Eigen::VectorXd v(n);
  for (Index i = 0; i < n; ++i) v(i) = rng.uniform(-1.0, 1.0);
  return v;
}

}  // namespace

Manifest synthetic_manifest(const SyntheticSpec& spec) {
  if (spec.groups < 1 || spec.per_group < 1 || spec.input_width < 1 || spec.image_tokens < 1 ||
      spec.prompt_words < 1 || !(spec.token_noise >= 0.0)) {
    throw Error(Errc::InvalidConfig, "synthetic spec sizes must be positive");
  }
  SplitMix64 rng(spec.seed);
  const Index d = spec.input_width;
  const double scale = 3.0 / std::sqrt(static_cast<double>(d));
  const Eigen::VectorXd u_quality = uniform_vector(rng, d);
  const Eigen::VectorXd u_auth = uniform_vector(rng, d);

  Manifest m;
  m.metric_names = default_metric_names();
  m.score_range.assign(m.metric_names.size(), ScoreRange{1.0, 5.0});

  std::set<std::string> used;
  for (std::size_t g = 0; g < spec.groups; ++g) {
    std::string prompt;
    for (int attempt = 0; prompt.empty() || used.count(prompt); ++attempt) {
      if (attempt == 1000) throw Error(Errc::InvalidConfig, "too many groups for the prompt vocabulary");
      prompt.clear();
      for (std::size_t w = 0; w < spec.prompt_words; ++w) {
        if (w) prompt += ' ';
        prompt += kWords[rng.next() % kWords.size()];
      }
    }
    used.insert(prompt);
    // the prompt's theme in image-latent space, scaled to the typical |z|
    Eigen::VectorXd theme = embed_text(prompt, d).cast<double>().colwise().mean().transpose();
    theme *= std::sqrt(static_cast<double>(d) / 3.0) / std::max(theme.norm(), 1e-12);

    for (std::size_t k = 0; k < spec.per_group; ++k) {
      // images follow their prompt to a varying degree
      const double follow = rng.uniform();
      const Eigen::VectorXd z = follow * theme + (1.0 - follow) * uniform_vector(rng, d);
      Mat<float> image(spec.image_tokens, d);
      for (Index t = 0; t < spec.image_tokens; ++t) {
        for (Index c = 0; c < d; ++c) {
          image(t, c) = static_cast<float>(z(c) + spec.token_noise * rng.uniform(-1.0, 1.0));
        }
      }
      const double q = u_quality.dot(z) * scale;
      const double a = 4.0 * (z.dot(theme) / theme.squaredNorm() - 0.5);
      const double t = (u_auth.dot(z) + 0.5 * u_quality.dot(z)) * scale;

      SampleRecord r;
      r.sample_id = "g" + std::to_string(g) + "_s" + std::to_string(k);
      r.prompt_id = "p" + std::to_string(g);
      r.prompt_text = prompt;
      r.feature_ref.image = std::move(image);
      r.mos = {1.0 + 4.0 * sigmoid(q), 1.0 + 4.0 * sigmoid(a), 1.0 + 4.0 * sigmoid(t)};
      m.records.push_back(std::move(r));
    }
  }
  validate_manifest(m);
  return m;
}

}  // namespace metricforge
