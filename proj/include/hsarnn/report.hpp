#pragma once

#include "hsarnn/harness.hpp"

#include "json.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace hsarnn::report {

inline constexpr std::string_view kAverageLabel = "Ave.";

/// Published success rates [%] at 30 Hz per variant and position; the
/// kAverageLabel position gives the mean column.
std::optional<double> reference_rate(model::Variant v, std::string_view position);

/// Shortest round-trip decimal, or "n/a".
std::string format_number(std::optional<double> value);

/// variant,position,successes,trials,rate,reference_rate: one row per cell,
/// then one kAverageLabel row per variant.
std::string report_csv(const harness::AblationReport& report);
/// variant,position,trial,offset,success,step,y,z
std::string trajectories_csv(const harness::AblationReport& report);
/// variant,position,trials,std_y,std_z,spread
std::string trajectory_stats_csv(const harness::AblationReport& report);

/// One panel per variant in the world's YZ plane: a dotted polyline per
/// trial and the solid mean trajectory.
std::string trajectory_svg(const harness::AblationReport& report, const std::string& position);

nlohmann::json summary_json(const harness::AblationReport& report);

/// Writes the CSVs and per-position SVGs; returns the paths written.
std::vector<std::filesystem::path> write_report(const harness::AblationReport& report,
                                                const std::filesystem::path& out_dir);

/// Rebuilds cells (trajectories, outcomes and spreads) from trajectories.csv.
harness::AblationReport parse_trajectories_csv(std::string_view text);

}  // namespace hsarnn::report
