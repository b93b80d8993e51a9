#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace metricforge {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Index = Eigen::Index;

enum class Errc {
  InvalidArgument,
  MissingField,
  DuplicateSampleId,
  ScoreOutOfRange,
  InconsistentMetricKeys,
  InconsistentPromptId,
  DegenerateRange,
  TooFewGroups,
  InvalidConfig,
  ShapeMismatch,
  IndexOutOfRange,
  BadHeader,
  NonFiniteValues,
  EmptySelection,
  NonPositiveLoss,
  DegenerateDenominator,
  LengthMismatch,
  EmptyManifest,
  BatchTooLarge,
  TrainingDiverged,
  VersionMismatch,
  CorruptCheckpoint,
  IoFailure,
  ChecksumMismatch,
  ZeroVariance,
  UnknownTemplate,
  NonPositiveGap,
  MetricNameMismatch,
};

std::string_view errc_name(Errc code) noexcept;

/// Exception carrying a stable error category. `line()` is the 1-based
/// physical file line when the error came from a parsed file, else 0.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what, std::size_t line = 0)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what),
        code_(code),
        line_(line) {}

  Errc code() const noexcept { return code_; }
  std::size_t line() const noexcept { return line_; }

 private:
  Errc code_;
  std::size_t line_;
};

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& m, std::string_view what) {
  if (!m.allFinite()) {
    throw Error(Errc::NonFiniteValues, std::string(what) + " contains non-finite values");
  }
}

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw Error(Errc::ShapeMismatch, what);
}

}  // namespace metricforge
