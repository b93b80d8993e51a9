#include "metricforge/features.hpp"

#include "metricforge/rng.hpp"
#include "metricforge/tensor_io.hpp"

#include <cctype>
#include <string>
#include <vector>

namespace metricforge {
namespace {

std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::string> word_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char ch : text) {
    if (std::isalnum(ch)) {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

}  // namespace

Mat<float> embed_text(std::string_view text, Index width) {
  if (width < 1) throw Error(Errc::InvalidConfig, "text feature width must be positive");
  const auto tokens = word_tokens(text);
  if (tokens.empty()) return Mat<float>::Zero(1, width);
  Mat<float> out(static_cast<Index>(tokens.size()), width);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    SplitMix64 rng(fnv1a(tokens[t]));
    for (Index c = 0; c < width; ++c) out(static_cast<Index>(t), c) = static_cast<float>(rng.uniform(-1.0, 1.0));
  }
  return out;
}

Mat<float> ingest_features(const std::filesystem::path& path) { return read_tensor_file(path); }

Mat<float> load_feature_source(const FeatureSource& src, const std::filesystem::path& base_dir) {
  if (const auto* p = std::get_if<std::filesystem::path>(&src)) {
    return ingest_features(p->is_relative() && !base_dir.empty() ? base_dir / *p : *p);
  }
  return std::get<Mat<float>>(src);
}

FusionInput<float> resolve_features(const SampleRecord& record, const std::filesystem::path& base_dir,
                                    std::optional<std::string_view> text_override) {
  FusionInput<float> x;
  x.image = load_feature_source(record.feature_ref.image, base_dir);
  if (text_override) {
    x.text = embed_text(*text_override, x.image.cols());
  } else if (record.feature_ref.text) {
    x.text = load_feature_source(*record.feature_ref.text, base_dir);
  } else {
    x.text = embed_text(record.prompt_text, x.image.cols());
  }
  return x;
}

}  // namespace metricforge
