#include "metricforge/common.hpp"

namespace metricforge {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::MissingField: return "MissingField";
    case Errc::DuplicateSampleId: return "DuplicateSampleId";
    case Errc::ScoreOutOfRange: return "ScoreOutOfRange";
    case Errc::InconsistentMetricKeys: return "InconsistentMetricKeys";
    case Errc::InconsistentPromptId: return "InconsistentPromptId";
    case Errc::DegenerateRange: return "DegenerateRange";
    case Errc::TooFewGroups: return "TooFewGroups";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::IndexOutOfRange: return "IndexOutOfRange";
    case Errc::BadHeader: return "BadHeader";
    case Errc::NonFiniteValues: return "NonFiniteValues";
    case Errc::EmptySelection: return "EmptySelection";
    case Errc::NonPositiveLoss: return "NonPositiveLoss";
    case Errc::DegenerateDenominator: return "DegenerateDenominator";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::EmptyManifest: return "EmptyManifest";
    case Errc::BatchTooLarge: return "BatchTooLarge";
    case Errc::TrainingDiverged: return "TrainingDiverged";
    case Errc::VersionMismatch: return "VersionMismatch";
    case Errc::CorruptCheckpoint: return "CorruptCheckpoint";
    case Errc::IoFailure: return "IoFailure";
    case Errc::ChecksumMismatch: return "ChecksumMismatch";
    case Errc::ZeroVariance: return "ZeroVariance";
    case Errc::UnknownTemplate: return "UnknownTemplate";
    case Errc::NonPositiveGap: return "NonPositiveGap";
    case Errc::MetricNameMismatch: return "MetricNameMismatch";
  }
  return "Unknown";
}

}  // namespace metricforge
