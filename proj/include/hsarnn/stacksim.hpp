#pragma once

#include "hsarnn/datastore.hpp"

#include <Eigen/Core>

#include <array>
#include <string>
#include <string_view>
#include <vector>

namespace hsarnn::sim {

using Index = Eigen::Index;
using Vec2 = Eigen::Vector2d;  // (y, z) in meters

inline constexpr double kWorldY = 0.5;
inline constexpr double kWorldZ = 0.3;
inline constexpr double kMaxSpeed = 0.5;       // m/s
inline constexpr double kApertureRate = 4.0;   // 1/s
inline constexpr double kGraspRadius = 0.015;
inline constexpr double kCupWidth = 0.04;
inline constexpr double kCupHeight = 0.05;
inline constexpr double kNestRise = 0.01;
inline constexpr double kNestTolerance = 0.01;
inline constexpr double kStackTolerance = 0.02;
inline constexpr double kSlotOffset = 0.03;
inline constexpr double kSuccessTolerance = 0.01;
inline constexpr double kClearance = 0.05;
inline constexpr double kHomeZ = 0.25;
inline constexpr double kLiftZ = 0.09;
inline constexpr double kTeacherMaxSpeed = 0.15;
inline constexpr double kJawWidth = 0.01;
inline constexpr Index kImageSide = 64;
inline constexpr std::string_view kSimVersion = "stacksim-1";

inline constexpr std::array<std::string_view, 5> kPositions = {"A", "B", "C", "D", "E"};
inline constexpr std::array<std::string_view, 3> kTaughtPositions = {"A", "C", "E"};

enum class Support { floor, nested, stacked, bridged, toppled, held };
std::string_view support_name(Support s);

/// Cup pose is (center y, bottom z). `below` lists the supporting cups.
struct Cup {
  Vec2 pose = Vec2::Zero();
  Support support = Support::floor;
  std::array<int, 2> below{-1, -1};

  bool operator==(const Cup&) const = default;
};

/// Gripper pose is (center y, jaw bottom z). An attached cup shares it.
struct WorldState {
  Vec2 gripper = Vec2::Zero();
  double aperture = 1.0;
  std::vector<Cup> cups;
  int attached = -1;
  double time = 0.0;

  /// True when no unattached cup rests on or in cup `i`.
  bool top_exposed(int i) const;
  bool operator==(const WorldState&) const = default;
};

/// Target pose and aperture. Aperture <= 0.5 means closed.
struct Command {
  Vec2 target = Vec2::Zero();
  double aperture = 1.0;

  Eigen::Vector3d to_vector() const { return {target.x(), target.y(), aperture}; }
  static Command from_vector(const Eigen::Vector3d& v) { return {Vec2(v[0], v[1]), v[2]}; }
  bool operator==(const Command&) const = default;
};

struct TaskSpec {
  std::string position;
  double nominal_y = 0.25;  // labelled position; the gripper's home
  double offset = 0.0;      // trial jitter applied to the cups only

  double center() const { return nominal_y + offset; }
  Vec2 home() const { return {nominal_y, kHomeZ}; }
  /// Target base slots (left, right) and the top slot, as cup poses.
  Vec2 left_slot() const { return {center() - kSlotOffset, 0.0}; }
  Vec2 right_slot() const { return {center() + kSlotOffset, 0.0}; }
  Vec2 top_slot() const { return {center(), kCupHeight}; }
};

/// Position label A..E, 5 cm apart around the middle of the world.
double position_y(std::string_view label);
TaskSpec make_task(std::string_view label, double offset = 0.0);

/// Three nested cups at the task center, gripper open at home.
WorldState initial_state(const TaskSpec& task);

/// Velocity-limited kinematic update. Non-finite command fields keep the
/// current value; finite ones are clamped to the world.
WorldState step_world(const WorldState& state, const Command& cmd, double dt);

/// Every unattached cup rests on the floor or on valid supporting cups.
bool supports_valid(const WorldState& state);

struct RenderOptions {
  bool draw_gripper = true;
};

/// 64x64 row-major frame in [0, 1], row 0 at the top of the world.
Eigen::ArrayXf render(const WorldState& state, const RenderOptions& options = {});

bool check_success(const WorldState& state, const TaskSpec& task);

/// Waypoint script for the pyramid task: unstack the nested cups onto the
/// left and right slots, bridge the last one on top, return home. Segments
/// follow trapezoidal velocity profiles stretched to fill steps / hz.
class TeacherScript {
 public:
  TeacherScript(const TaskSpec& task, Index steps = 400, double hz = 10.0);

  Command at(Index t) const;
  Index steps() const { return steps_; }
  double hz() const { return hz_; }
  double peak_speed() const { return peak_speed_; }

 private:
  struct Segment {
    double start = 0.0;
    double duration = 0.0;
    Vec2 from, to;
    double ap_from = 1.0, ap_to = 1.0;
    bool trapezoid = false;
  };
  Command sample(double time) const;

  Index steps_;
  double hz_;
  double peak_speed_ = 0.0;
  std::vector<Segment> segments_;
};

Command teacher_policy(const TaskSpec& task, Index t, Index steps = 400, double hz = 10.0);

struct TeacherRun {
  data::Episode episode;  // normalized with its own bounds
  WorldState final_state;
  bool success = false;
};

/// Executes the teacher through step_world at dt = 1 / hz, recording
/// i_t = render(state_t) and a_t = the command issued at step t.
TeacherRun run_teacher(const TaskSpec& task, Index steps, double hz, std::uint64_t seed);

}  // namespace hsarnn::sim
