#pragma once

#include "metricforge/dataset.hpp"

namespace metricforge {

/// Learnable toy data: each image is a latent vector z observed through
/// noisy tokens, and its scores are smooth functions of z and the prompt.
struct SyntheticSpec {
  std::size_t groups = 8;
  std::size_t per_group = 4;
  Index input_width = 8;
  Index image_tokens = 4;
  std::size_t prompt_words = 3;
  double token_noise = 0.1;
  std::uint64_t seed = 7;
};

/// Three-metric manifest (quality, alignment, authenticity) with raw scores
/// in [1, 5] and inline image features.
Manifest synthetic_manifest(const SyntheticSpec& spec);

}  // namespace metricforge
