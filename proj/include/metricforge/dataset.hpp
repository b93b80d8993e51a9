#pragma once

#include "metricforge/common.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace metricforge {

/// A feature payload: either a tensor file on disk or a matrix carried inline.
using FeatureSource = std::variant<std::filesystem::path, Mat<float>>;

/// Where a record's features live. Text features are optional; when absent
/// the prompt text is embedded by the hashed text featurizer.
struct FeatureRef {
  FeatureSource image;
  std::optional<FeatureSource> text;
};

struct SampleRecord {
  std::string sample_id;
  std::string prompt_id;
  std::string prompt_text;
  FeatureRef feature_ref;
  std::vector<double> mos;  // aligned with Manifest::metric_names
};

struct ScoreRange {
  double min = 0.0;
  double max = 1.0;
};

struct Manifest {
  std::vector<std::string> metric_names;
  std::vector<ScoreRange> score_range;  // aligned with metric_names
  std::vector<SampleRecord> records;
  std::filesystem::path base_dir;       // relative tensor paths resolve against this

  std::size_t metric_count() const noexcept { return metric_names.size(); }
  std::optional<std::size_t> metric_index(std::string_view name) const;
  bool is_normalized() const noexcept;
};

struct SplitSpec {
  double train_fraction = 0.8;
  std::uint64_t seed = 42;
};

struct SplitResult {
  Manifest train;
  Manifest test;
  std::vector<std::string> group_order;   // prompt_ids in first-appearance order
  std::vector<std::string> train_groups;  // in shuffled order
  std::vector<std::string> test_groups;
};

inline const std::vector<std::string>& default_metric_names() {
  static const std::vector<std::string> names{"quality", "alignment", "authenticity"};
  return names;
}

/// Parses the JSON-lines manifest format. The first line is the header
/// {"metric_names": [...], "score_range": {name: [min, max]}}; every other
/// non-blank line is one record. Errors carry the physical line number.
Manifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir = {});
Manifest load_manifest(const std::filesystem::path& path);

/// Writes the manifest. Relative tensor paths are rewritten as absolute so
/// the file can live in a different directory from its source.
void save_manifest(const Manifest& m, const std::filesystem::path& path);
void write_manifest(const Manifest& m, std::ostream& out);

/// Checks every manifest invariant; throws the first violation found.
void validate_manifest(const Manifest& m);

/// Maps each score affinely onto [0,1] using the declared range. The result
/// declares range [0,1], so normalizing twice is the identity.
Manifest normalize_scores(const Manifest& m);

std::vector<std::string> prompt_groups(const Manifest& m);

/// Shuffles prompt groups (splitmix64 + Fisher-Yates, seeded by spec.seed)
/// and assigns the first ceil(fraction * groups) to train, keeping at least
/// one group on each side.
SplitResult content_isolated_split(const Manifest& m, const SplitSpec& spec);

/// Number of train groups for `group_count` groups at `fraction`.
std::size_t train_group_count(std::size_t group_count, double fraction);

nlohmann::ordered_json split_report(const SplitResult& split, const SplitSpec& spec);

/// Stable content hash of the records and metadata (hex CRC-32).
std::string manifest_fingerprint(const Manifest& m);

nlohmann::ordered_json feature_ref_to_json(const FeatureRef& ref, const std::filesystem::path& base_dir);

}  // namespace metricforge
