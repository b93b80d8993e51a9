#pragma once

#include "metricforge/dataset.hpp"
#include "metricforge/encoder.hpp"

#include <filesystem>
#include <optional>
#include <string_view>

namespace metricforge {

/// Hashed bag-of-words text features: each lowercase alphanumeric token is
/// hashed (FNV-1a) into a splitmix64 stream that yields `width` entries in
/// [-1, 1). Text with no tokens yields one all-zero row.
Mat<float> embed_text(std::string_view text, Index width);

/// Reads a standalone tensor file of precomputed backbone features.
Mat<float> ingest_features(const std::filesystem::path& path);

Mat<float> load_feature_source(const FeatureSource& src, const std::filesystem::path& base_dir);

/// Resolves a record into encoder input. `text_override` replaces the
/// record's prompt (prompt-design scoring); otherwise stored text features
/// win over the embedded prompt text.
FusionInput<float> resolve_features(const SampleRecord& record, const std::filesystem::path& base_dir,
                                    std::optional<std::string_view> text_override = std::nullopt);

}  // namespace metricforge
