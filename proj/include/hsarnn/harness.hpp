#pragma once

#include "hsarnn/model.hpp"
#include "hsarnn/stacksim.hpp"
#include "hsarnn/trainer.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace hsarnn::harness {

using Index = Eigen::Index;

inline constexpr std::string_view kCheckpointExtension = ".hsck";

struct DatasetOptions {
  std::vector<std::string> positions{"A", "C", "E"};
  Index steps = 400;
  double hz = 10.0;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;
};

/// Runs the teacher at each position and writes `<position>_<seed>.hsep`.
/// Throws before writing anything if the teacher fails at any position.
std::vector<std::filesystem::path> generate_dataset(const DatasetOptions& options);

struct ScenarioConfig {
  std::string position = "C";
  double speed = 3.0;    // control rate / teaching rate
  double noise = 0.0;    // Gaussian pixel noise sigma
  double jitter = 0.01;  // cup offset drawn uniformly from [-jitter, jitter] m
  Index trials = 10;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const ScenarioConfig& sc);
void from_json(const nlohmann::json& j, ScenarioConfig& sc);

struct TrialResult {
  std::string position;
  double speed = 1.0;
  double noise = 0.0;
  Index trial = 0;
  double offset = 0.0;
  bool success = false;
  Eigen::MatrixX2d trajectory;     // gripper (y, z) after each executed step
  std::vector<double> step_seconds;  // wall time of each inference step
  double sim_seconds = 0.0;
};

/// World time covered by `steps` control ticks at dt = 1 / (speed * hz).
double sim_duration(Index steps, double speed, double hz);

/// Engine for one trial, seeded from (seed, trial).
std::mt19937_64 trial_engine(std::uint64_t seed, Index trial);

/// Closed-loop execution of the checkpoint's model. Each tick renders the
/// world, adds pixel noise, feeds the model its own previous prediction and
/// applies the decoded command for dt = 1 / (speed * hz). Runs for the
/// checkpoint's training episode length. When `expected` is given the
/// checkpoint must hold that variant.
std::vector<TrialResult> run_closed_loop(const train::Checkpoint& ckpt, const ScenarioConfig& scenario,
                                         std::optional<model::Variant> expected = std::nullopt);

/// Same loop with the model replaced by the scripted teacher, replaying the
/// command for the next step on each tick.
std::vector<TrialResult> run_teacher_oracle(const ScenarioConfig& scenario, Index steps, double hz);

/// Hand-trajectory spread over trials: per-step population standard
/// deviation of y and z, averaged over steps. NaN with fewer than 2 trials.
struct TrajectorySpread {
  double std_y = 0.0;
  double std_z = 0.0;
  double spread = 0.0;  // mean over steps of sqrt(var_y + var_z)
};

TrajectorySpread trajectory_spread(std::span<const TrialResult> trials);
/// Per-step mean over trials, or an empty matrix without trials.
Eigen::MatrixX2d mean_trajectory(std::span<const TrialResult> trials);

struct AblationCell {
  model::Variant variant = model::Variant::HSARNNST;
  std::string position;
  std::vector<TrialResult> trials;
  TrajectorySpread spread;

  Index successes() const;
  Index trial_count() const { return static_cast<Index>(trials.size()); }
  /// successes / trials * 100, or nullopt without trials.
  std::optional<double> rate() const;
};

struct TrendFlags {
  std::optional<bool> hsarnnst_ge_sarnn;    // the gated ordering
  std::optional<bool> hsarnnst_ge_sarnnst;
  std::optional<bool> sarnnst_ge_hsarnn;
  std::optional<bool> st_spread_le_flat_at_c;  // SARNNST spread <= SARNN spread at C
};

struct AblationReport {
  double speed = 3.0;
  double noise = 0.0;
  double jitter = 0.01;
  Index trials = 0;
  std::uint64_t seed = 0;
  std::vector<model::Variant> variants;
  std::vector<std::string> positions;
  std::vector<AblationCell> cells;  // variant-major, in the order above

  const AblationCell& cell(model::Variant v, const std::string& position) const;
  /// Mean of the per-position rates, or nullopt when no position has trials.
  std::optional<double> mean_rate(model::Variant v) const;
  TrendFlags trends() const;
};

struct AblationOptions {
  std::filesystem::path data_dir;
  std::filesystem::path ckpt_dir;
  std::filesystem::path out_dir;
  std::vector<model::Variant> variants{model::kAllVariants.begin(), model::kAllVariants.end()};
  std::vector<std::string> positions{sim::kPositions.begin(), sim::kPositions.end()};
  double speed = 3.0;
  double noise = 0.0;
  double jitter = 0.01;
  Index trials = 10;
  std::uint64_t seed = 0;
  bool allow_training = true;
  train::TrainConfig train;
  std::function<void(const std::string&)> log;
};

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, model::Variant v);

/// Loads `<ckpt_dir>/<variant>.hsck`, or trains it on the episodes in
/// `data_dir` and saves it (with its loss log) when absent and allowed.
train::Checkpoint ensure_checkpoint(const AblationOptions& options, model::Variant v);

/// Runs every (variant, position) cell and, when out_dir is set, writes
/// report.csv, trajectories.csv, trajectory_stats.csv and one
/// trajectories_<position>.svg per position.
AblationReport evaluate_ablation(const AblationOptions& options);

}  // namespace hsarnn::harness
