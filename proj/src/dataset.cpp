#include "metricforge/dataset.hpp"

#include "metricforge/rng.hpp"
#include "metricforge/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace metricforge {
namespace {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

std::string at_line(std::size_t line) { return "line " + std::to_string(line); }

const json& require_field(const json& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) {
    throw Error(Errc::MissingField, at_line(line) + ": missing field '" + key + "'", line);
  }
  return *it;
}

std::string require_string(const json& obj, const char* key, std::size_t line) {
  const json& v = require_field(obj, key, line);
  if (!v.is_string()) {
    throw Error(Errc::MissingField, at_line(line) + ": field '" + key + "' must be a string", line);
  }
  return v.get<std::string>();
}

Mat<float> matrix_from_json(const json& j, std::size_t line) {
  if (!j.is_array() || j.empty() || !j.front().is_array() || j.front().empty()) {
    throw Error(Errc::MissingField, at_line(line) + ": inline features must be a non-empty 2-D array",
                line);
  }
  const auto rows = static_cast<Index>(j.size());
  const auto cols = static_cast<Index>(j.front().size());
  Mat<float> m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    const json& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Index>(row.size()) != cols) {
      throw Error(Errc::ShapeMismatch, at_line(line) + ": ragged inline feature matrix", line);
    }
    for (Index c = 0; c < cols; ++c) {
      const json& v = row[static_cast<std::size_t>(c)];
      if (!v.is_number()) {
        throw Error(Errc::NonFiniteValues, at_line(line) + ": non-numeric feature entry", line);
      }
      m(r, c) = static_cast<float>(v.get<double>());
    }
  }
  if (!m.allFinite()) {
    throw Error(Errc::NonFiniteValues, at_line(line) + ": non-finite inline feature", line);
  }
  return m;
}

FeatureSource source_from_json(const json& j, std::size_t line) {
  if (j.is_string()) return std::filesystem::path(j.get<std::string>());
  return matrix_from_json(j, line);
}

FeatureRef feature_ref_from_json(const json& j, std::size_t line) {
  FeatureRef ref;
  if (j.is_string()) {
    ref.image = std::filesystem::path(j.get<std::string>());
    return ref;
  }
  if (!j.is_object()) {
    throw Error(Errc::MissingField, at_line(line) + ": feature_ref must be a path or an object", line);
  }
  ref.image = source_from_json(require_field(j, "image", line), line);
  if (auto it = j.find("text"); it != j.end() && !it->is_null()) {
    ref.text = source_from_json(*it, line);
  }
  return ref;
}

ordered_json source_to_json(const FeatureSource& src, const std::filesystem::path& base_dir) {
  if (const auto* p = std::get_if<std::filesystem::path>(&src)) {
    std::filesystem::path out = *p;
    if (!base_dir.empty() && out.is_relative()) {
      out = std::filesystem::absolute(base_dir / out).lexically_normal();
    }
    return out.generic_string();
  }
  const auto& m = std::get<Mat<float>>(src);
  ordered_json rows = ordered_json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    ordered_json row = ordered_json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(static_cast<double>(m(r, c)));
    rows.push_back(std::move(row));
  }
  return rows;
}

ordered_json header_json(const Manifest& m) {
  ordered_json header;
  header["metric_names"] = m.metric_names;
  ordered_json ranges = ordered_json::object();
  for (std::size_t i = 0; i < m.metric_names.size(); ++i) {
    ranges[m.metric_names[i]] = {m.score_range[i].min, m.score_range[i].max};
  }
  header["score_range"] = std::move(ranges);
  return header;
}

ordered_json record_json(const Manifest& m, const SampleRecord& r,
                         const std::filesystem::path& base_dir) {
  ordered_json j;
  j["sample_id"] = r.sample_id;
  j["prompt_id"] = r.prompt_id;
  j["prompt_text"] = r.prompt_text;
  ordered_json ref;
  if (!r.feature_ref.text && std::holds_alternative<std::filesystem::path>(r.feature_ref.image)) {
    ref = source_to_json(r.feature_ref.image, base_dir);
  } else {
    ref["image"] = source_to_json(r.feature_ref.image, base_dir);
    if (r.feature_ref.text) ref["text"] = source_to_json(*r.feature_ref.text, base_dir);
  }
  j["feature_ref"] = std::move(ref);
  ordered_json mos = ordered_json::object();
  for (std::size_t i = 0; i < m.metric_names.size(); ++i) mos[m.metric_names[i]] = r.mos[i];
  j["mos"] = std::move(mos);
  return j;
}

void write_lines(const Manifest& m, std::ostream& out, const std::filesystem::path& base_dir) {
  out << header_json(m).dump() << '\n';
  for (const auto& r : m.records) out << record_json(m, r, base_dir).dump() << '\n';
}

}  // namespace

std::optional<std::size_t> Manifest::metric_index(std::string_view name) const {
  for (std::size_t i = 0; i < metric_names.size(); ++i) {
    if (metric_names[i] == name) return i;
  }
  return std::nullopt;
}

bool Manifest::is_normalized() const noexcept {
  return std::all_of(score_range.begin(), score_range.end(),
                     [](const ScoreRange& r) { return r.min == 0.0 && r.max == 1.0; });
}

Manifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir) {
  Manifest m;
  m.base_dir = base_dir;

  std::string text;
  std::size_t line = 0;
  bool have_header = false;
  std::unordered_set<std::string> seen_ids;
  std::unordered_map<std::string, std::string> prompt_owner;  // prompt_text -> prompt_id

  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;

    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw Error(Errc::MissingField, at_line(line) + ": invalid JSON (" + e.what() + ")", line);
    }
    if (!j.is_object()) {
      throw Error(Errc::MissingField, at_line(line) + ": expected a JSON object", line);
    }

    if (!have_header) {
      const json& names = require_field(j, "metric_names", line);
      const json& ranges = require_field(j, "score_range", line);
      if (!names.is_array() || names.empty()) {
        throw Error(Errc::MissingField, at_line(line) + ": metric_names must be a non-empty array",
                    line);
      }
      std::set<std::string> unique;
      for (const auto& n : names) {
        if (!n.is_string()) {
          throw Error(Errc::MissingField, at_line(line) + ": metric names must be strings", line);
        }
        if (!unique.insert(n.get<std::string>()).second) {
          throw Error(Errc::InvalidArgument,
                      at_line(line) + ": duplicate metric name '" + n.get<std::string>() + "'", line);
        }
        m.metric_names.push_back(n.get<std::string>());
      }
      for (const auto& name : m.metric_names) {
        auto it = ranges.find(name);
        if (it == ranges.end() || !it->is_array() || it->size() != 2 || !(*it)[0].is_number() ||
            !(*it)[1].is_number()) {
          throw Error(Errc::MissingField,
                      at_line(line) + ": score_range missing [min, max] for '" + name + "'", line);
        }
        m.score_range.push_back({(*it)[0].get<double>(), (*it)[1].get<double>()});
      }
      have_header = true;
      continue;
    }

    SampleRecord r;
    r.sample_id = require_string(j, "sample_id", line);
    r.prompt_id = require_string(j, "prompt_id", line);
    r.prompt_text = require_string(j, "prompt_text", line);
    if (r.prompt_id.empty()) {
      throw Error(Errc::MissingField, at_line(line) + ": prompt_id must be non-empty", line);
    }
    r.feature_ref = feature_ref_from_json(require_field(j, "feature_ref", line), line);

    const json& mos = require_field(j, "mos", line);
    if (!mos.is_object() || mos.size() != m.metric_names.size()) {
      throw Error(Errc::InconsistentMetricKeys,
                  at_line(line) + ": mos keys differ from the declared metric_names", line);
    }
    r.mos.resize(m.metric_names.size());
    for (std::size_t i = 0; i < m.metric_names.size(); ++i) {
      auto it = mos.find(m.metric_names[i]);
      if (it == mos.end()) {
        throw Error(Errc::InconsistentMetricKeys,
                    at_line(line) + ": mos lacks metric '" + m.metric_names[i] + "'", line);
      }
      if (!it->is_number()) {
        throw Error(Errc::MissingField,
                    at_line(line) + ": mos '" + m.metric_names[i] + "' must be a number", line);
      }
      const double v = it->get<double>();
      const ScoreRange& range = m.score_range[i];
      if (!std::isfinite(v) || v < range.min || v > range.max) {
        std::ostringstream msg;
        msg << at_line(line) << ": mos '" << m.metric_names[i] << "' = " << v
            << " outside [" << range.min << ", " << range.max << "]";
        throw Error(Errc::ScoreOutOfRange, msg.str(), line);
      }
      r.mos[i] = v;
    }

    if (!seen_ids.insert(r.sample_id).second) {
      throw Error(Errc::DuplicateSampleId,
                  at_line(line) + ": duplicate sample_id '" + r.sample_id + "'", line);
    }
    auto [owner, inserted] = prompt_owner.emplace(r.prompt_text, r.prompt_id);
    if (!inserted && owner->second != r.prompt_id) {
      throw Error(Errc::InconsistentPromptId,
                  at_line(line) + ": prompt_text already grouped under prompt_id '" +
                      owner->second + "'",
                  line);
    }
    m.records.push_back(std::move(r));
  }

  if (!have_header) throw Error(Errc::MissingField, "manifest has no header line", 1);
  return m;
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoFailure, "cannot open manifest " + path.string());
  return parse_manifest(in, std::filesystem::absolute(path).parent_path());
}

void write_manifest(const Manifest& m, std::ostream& out) { write_lines(m, out, m.base_dir); }

void save_manifest(const Manifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::IoFailure, "cannot write manifest " + path.string());
  write_lines(m, out, m.base_dir);
  if (!out) throw Error(Errc::IoFailure, "short write to " + path.string());
}

void validate_manifest(const Manifest& m) {
  if (m.metric_names.empty()) throw Error(Errc::InvalidArgument, "manifest declares no metrics");
  if (m.score_range.size() != m.metric_names.size()) {
    throw Error(Errc::MissingField, "score_range must cover every metric");
  }
  std::set<std::string> unique(m.metric_names.begin(), m.metric_names.end());
  if (unique.size() != m.metric_names.size()) {
    throw Error(Errc::InvalidArgument, "duplicate metric names");
  }
  std::unordered_set<std::string> ids;
  std::unordered_map<std::string, std::string> owner;
  for (std::size_t k = 0; k < m.records.size(); ++k) {
    const auto& r = m.records[k];
    const std::string where = "record " + std::to_string(k + 1);
    if (r.prompt_id.empty()) throw Error(Errc::MissingField, where + ": empty prompt_id");
    if (r.mos.size() != m.metric_names.size()) {
      throw Error(Errc::InconsistentMetricKeys, where + ": wrong number of scores");
    }
    for (std::size_t i = 0; i < r.mos.size(); ++i) {
      if (!std::isfinite(r.mos[i]) || r.mos[i] < m.score_range[i].min ||
          r.mos[i] > m.score_range[i].max) {
        throw Error(Errc::ScoreOutOfRange, where + ": score outside declared range");
      }
    }
    if (!ids.insert(r.sample_id).second) {
      throw Error(Errc::DuplicateSampleId, where + ": duplicate sample_id '" + r.sample_id + "'");
    }
    auto [it, inserted] = owner.emplace(r.prompt_text, r.prompt_id);
    if (!inserted && it->second != r.prompt_id) {
      throw Error(Errc::InconsistentPromptId, where + ": prompt_text maps to two prompt_ids");
    }
  }
}

Manifest normalize_scores(const Manifest& m) {
  for (std::size_t i = 0; i < m.score_range.size(); ++i) {
    if (!(m.score_range[i].min < m.score_range[i].max)) {
      throw Error(Errc::DegenerateRange, "metric '" + m.metric_names[i] + "' has min >= max");
    }
  }
  Manifest out = m;
  for (auto& r : out.records) {
    for (std::size_t i = 0; i < r.mos.size(); ++i) {
      const ScoreRange& range = m.score_range[i];
      r.mos[i] = (r.mos[i] - range.min) / (range.max - range.min);
    }
  }
  for (auto& range : out.score_range) range = {0.0, 1.0};
  return out;
}

std::vector<std::string> prompt_groups(const Manifest& m) {
  std::vector<std::string> order;
  std::unordered_set<std::string> seen;
  for (const auto& r : m.records) {
    if (seen.insert(r.prompt_id).second) order.push_back(r.prompt_id);
  }
  return order;
}

std::size_t train_group_count(std::size_t group_count, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw Error(Errc::InvalidArgument, "train_fraction must lie strictly between 0 and 1");
  }
  if (group_count < 2) throw Error(Errc::TooFewGroups, "need at least 2 prompt groups");
  // Products such as 0.7 * 10 land a hair above the integer in binary
  // floating point; treat anything within 1e-9 of an integer as that integer.
  const double raw = fraction * static_cast<double>(group_count);
  auto n = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return std::clamp<std::size_t>(n, 1, group_count - 1);
}

SplitResult content_isolated_split(const Manifest& m, const SplitSpec& spec) {
  SplitResult out;
  out.group_order = prompt_groups(m);
  const std::size_t n_train = train_group_count(out.group_order.size(), spec.train_fraction);

  std::vector<std::string> shuffled = out.group_order;
  SplitMix64 rng(spec.seed);
  fisher_yates(std::span<std::string>(shuffled), rng);

  out.train_groups.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.test_groups.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(n_train), shuffled.end());
  const std::unordered_set<std::string> train_set(out.train_groups.begin(), out.train_groups.end());

  out.train.metric_names = out.test.metric_names = m.metric_names;
  out.train.score_range = out.test.score_range = m.score_range;
  out.train.base_dir = out.test.base_dir = m.base_dir;

  // Records stay in file order, so each group's internal order is preserved.
  for (const auto& r : m.records) {
    (train_set.contains(r.prompt_id) ? out.train : out.test).records.push_back(r);
  }
  return out;
}

nlohmann::ordered_json split_report(const SplitResult& split, const SplitSpec& spec) {
  ordered_json j;
  j["seed"] = spec.seed;
  j["train_fraction"] = spec.train_fraction;
  j["group_count"] = split.group_order.size();
  j["train_groups"] = split.train_groups;
  j["test_groups"] = split.test_groups;
  j["train_records"] = split.train.records.size();
  j["test_records"] = split.test.records.size();
  return j;
}

std::string manifest_fingerprint(const Manifest& m) {
  std::ostringstream ss;
  write_lines(m, ss, {});
  std::ostringstream hex;
  hex << std::hex << std::setw(8) << std::setfill('0') << crc32(ss.str());
  return hex.str();
}

nlohmann::ordered_json feature_ref_to_json(const FeatureRef& ref, const std::filesystem::path& base_dir) {
  ordered_json j;
  j["image"] = source_to_json(ref.image, base_dir);
  if (ref.text) j["text"] = source_to_json(*ref.text, base_dir);
  return j;
}

}  // namespace metricforge
