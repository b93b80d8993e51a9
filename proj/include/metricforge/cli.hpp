#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace metricforge::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitRuntime = 3;

/// Runs one command line (without the program name). The run directory is
/// printed on `out`; diagnostics go to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// <command>-<crc32 of the canonical config>-<UTC timestamp>, made unique
/// within `root` by a numeric suffix.
std::filesystem::path make_run_dir(const std::filesystem::path& root, const std::string& command,
                                   const nlohmann::json& config);

/// True when METRICFORGE_DETERMINISTIC=1.
bool deterministic_mode();

}  // namespace metricforge::cli
