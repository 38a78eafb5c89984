#include "hsarnn/stacksim.hpp"

#include "hsarnn/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace hsarnn::sim {

namespace {

constexpr double kEps = 1e-9;
constexpr std::array<float, 3> kShades = {0.5f, 0.65f, 0.8f};
constexpr double kRampSeconds = 0.6;
constexpr double kGripHoldSeconds = 0.3;
constexpr double kFinalHoldSeconds = 1.0;
constexpr double kAccelFraction = 0.25;

bool overlaps(double ya, double yb) { return std::abs(ya - yb) < kCupWidth - kEps; }

}  // namespace

std::string_view support_name(Support s) {
  switch (s) {
    case Support::floor: return "floor";
    case Support::nested: return "nested";
    case Support::stacked: return "stacked";
    case Support::bridged: return "bridged";
    case Support::toppled: return "toppled";
    case Support::held: return "held";
  }
  return "?";
}

bool WorldState::top_exposed(int i) const {
  for (std::size_t k = 0; k < cups.size(); ++k) {
    if (static_cast<int>(k) == attached || static_cast<int>(k) == i) continue;
    const auto& b = cups[k].below;
    if (b[0] == i || b[1] == i) return false;
  }
  return true;
}

double position_y(std::string_view label) {
  for (std::size_t i = 0; i < kPositions.size(); ++i) {
    if (kPositions[i] == label) return 0.15 + 0.05 * static_cast<double>(i);
  }
  throw ConfigError("stacksim", "unknown position '" + std::string(label) + "' (expected A-E)");
}

TaskSpec make_task(std::string_view label, double offset) {
  return TaskSpec{std::string(label), position_y(label), offset};
}

WorldState initial_state(const TaskSpec& task) {
  WorldState s;
  s.gripper = task.home();
  s.aperture = 1.0;
  const double c = task.center();
  s.cups.resize(3);
  s.cups[0] = {Vec2(c, 0.0), Support::floor, {-1, -1}};
  s.cups[1] = {Vec2(c, kNestRise), Support::nested, {0, -1}};
  s.cups[2] = {Vec2(c, 2 * kNestRise), Support::nested, {1, -1}};
  return s;
}

namespace {

struct Landing {
  Vec2 pose;
  Support support = Support::floor;
  std::array<int, 2> below{-1, -1};
};

Landing land(const WorldState& s, int cup, const Vec2& release) {
  const double y = release.x();
  const double reach = release.y() + kNestRise;
  std::vector<int> exposed;
  for (int j = 0; j < static_cast<int>(s.cups.size()); ++j) {
    if (j != cup && s.top_exposed(j)) exposed.push_back(j);
  }
  auto top = [&](int j) { return s.cups[static_cast<std::size_t>(j)].pose.y() + kCupHeight; };
  auto cy = [&](int j) { return s.cups[static_cast<std::size_t>(j)].pose.x(); };

  int best = -1;
  for (int j : exposed) {
    const double z = s.cups[static_cast<std::size_t>(j)].pose.y() + kNestRise;
    if (std::abs(cy(j) - y) <= kNestTolerance + kEps && z <= reach + kEps &&
        (best < 0 || z > s.cups[static_cast<std::size_t>(best)].pose.y() + kNestRise)) {
      best = j;
    }
  }
  if (best >= 0) return {Vec2(cy(best), s.cups[static_cast<std::size_t>(best)].pose.y() + kNestRise), Support::nested, {best, -1}};

  for (int j : exposed) {
    if (std::abs(cy(j) - y) <= kStackTolerance + kEps && top(j) <= reach + kEps && (best < 0 || top(j) > top(best))) {
      best = j;
    }
  }
  if (best >= 0) return {Vec2(y, top(best)), Support::stacked, {best, -1}};

  for (int a : exposed) {
    for (int b : exposed) {
      if (!(cy(a) < y && y < cy(b))) continue;
      if (!overlaps(cy(a), y) || !overlaps(cy(b), y)) continue;
      if (std::abs(top(a) - top(b)) > kEps || top(a) > reach + kEps) continue;
      return {Vec2(y, top(a)), Support::bridged, {a, b}};
    }
  }

  for (int j : exposed) {
    if (overlaps(cy(j), y) && top(j) <= reach + kEps) return {Vec2(y, 0.0), Support::toppled, {-1, -1}};
  }
  return {Vec2(y, 0.0), Support::floor, {-1, -1}};
}

int grasp_candidate(const WorldState& s) {
  int best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (int j = 0; j < static_cast<int>(s.cups.size()); ++j) {
    if (!s.top_exposed(j)) continue;
    const double d = (s.cups[static_cast<std::size_t>(j)].pose - s.gripper).norm();
    if (d <= kGraspRadius + kEps && d < best_d) {
      best = j;
      best_d = d;
    }
  }
  return best;
}

}  // namespace

WorldState step_world(const WorldState& state, const Command& cmd, double dt) {
  if (!(dt > 0.0)) throw ConfigError("stacksim", "dt must be positive");
  WorldState s = state;
  Vec2 target = s.gripper;
  if (std::isfinite(cmd.target.x())) target.x() = std::clamp(cmd.target.x(), 0.0, kWorldY);
  if (std::isfinite(cmd.target.y())) target.y() = std::clamp(cmd.target.y(), 0.0, kWorldZ);
  const double ap_target = std::isfinite(cmd.aperture) ? std::clamp(cmd.aperture, 0.0, 1.0) : s.aperture;

  const Vec2 delta = target - s.gripper;
  const double dist = delta.norm();
  const double reach = kMaxSpeed * dt;
  s.gripper = dist <= reach ? target : Vec2(s.gripper + delta * (reach / dist));

  const double prev_ap = s.aperture;
  const double slew = kApertureRate * dt;
  s.aperture = std::clamp(ap_target, prev_ap - slew, prev_ap + slew);

  if (s.attached < 0 && prev_ap >= 0.5 && s.aperture < 0.5) {
    const int j = grasp_candidate(s);
    if (j >= 0) {
      s.attached = j;
      auto& cup = s.cups[static_cast<std::size_t>(j)];
      cup.support = Support::held;
      cup.below = {-1, -1};
    }
  } else if (s.attached >= 0 && prev_ap <= 0.5 && s.aperture > 0.5) {
    const int j = s.attached;
    s.attached = -1;
    const Landing l = land(s, j, s.gripper);
    auto& cup = s.cups[static_cast<std::size_t>(j)];
    cup.pose = l.pose;
    cup.support = l.support;
    cup.below = l.below;
  }
  if (s.attached >= 0) s.cups[static_cast<std::size_t>(s.attached)].pose = s.gripper;
  s.time += dt;
  return s;
}

bool supports_valid(const WorldState& state) {
  for (int i = 0; i < static_cast<int>(state.cups.size()); ++i) {
    if (i == state.attached) continue;
    const Cup& c = state.cups[static_cast<std::size_t>(i)];
    auto below = [&](int k) -> const Cup* {
      const int j = c.below[static_cast<std::size_t>(k)];
      if (j < 0 || j == state.attached || j >= static_cast<int>(state.cups.size()) || j == i) return nullptr;
      return &state.cups[static_cast<std::size_t>(j)];
    };
    switch (c.support) {
      case Support::floor:
      case Support::toppled:
        if (std::abs(c.pose.y()) > kEps) return false;
        break;
      case Support::nested: {
        const Cup* b = below(0);
        if (!b || std::abs(c.pose.y() - b->pose.y() - kNestRise) > kEps) return false;
        break;
      }
      case Support::stacked: {
        const Cup* b = below(0);
        if (!b || std::abs(c.pose.y() - b->pose.y() - kCupHeight) > kEps) return false;
        break;
      }
      case Support::bridged: {
        const Cup* a = below(0);
        const Cup* b = below(1);
        if (!a || !b || std::abs(c.pose.y() - a->pose.y() - kCupHeight) > kEps ||
            std::abs(c.pose.y() - b->pose.y() - kCupHeight) > kEps) {
          return false;
        }
        break;
      }
      case Support::held:
        return false;
    }
  }
  return true;
}

Eigen::ArrayXf render(const WorldState& state, const RenderOptions& options) {
  Eigen::ArrayXf img = Eigen::ArrayXf::Zero(kImageSide * kImageSide);
  const double px_y = kWorldY / static_cast<double>(kImageSide);
  const double px_z = kWorldZ / static_cast<double>(kImageSide);
  auto fill = [&](double y0, double y1, double z0, double z1, float value) {
    for (Index r = 0; r < kImageSide; ++r) {
      const double z = kWorldZ - (static_cast<double>(r) + 0.5) * px_z;
      if (z < z0 || z > z1) continue;
      for (Index c = 0; c < kImageSide; ++c) {
        const double y = (static_cast<double>(c) + 0.5) * px_y;
        if (y >= y0 && y <= y1) img[r * kImageSide + c] = value;
      }
    }
  };
  for (std::size_t i = 0; i < state.cups.size(); ++i) {
    const Vec2& p = state.cups[i].pose;
    fill(p.x() - kCupWidth / 2, p.x() + kCupWidth / 2, p.y(), p.y() + kCupHeight, kShades[i % kShades.size()]);
  }
  if (options.draw_gripper) {
    const double gap = kCupWidth + kCupWidth * state.aperture;
    const Vec2& g = state.gripper;
    fill(g.x() - gap / 2 - kJawWidth, g.x() - gap / 2, g.y(), g.y() + kCupHeight, 1.0f);
    fill(g.x() + gap / 2, g.x() + gap / 2 + kJawWidth, g.y(), g.y() + kCupHeight, 1.0f);
  }
  return img;
}

bool check_success(const WorldState& state, const TaskSpec& task) {
  if (state.attached >= 0 || state.aperture <= 0.5 || state.cups.size() != 3) return false;
  int left = -1, right = -1, top = -1;
  for (int i = 0; i < 3; ++i) {
    const Cup& c = state.cups[static_cast<std::size_t>(i)];
    if (c.support == Support::toppled) return false;
    if (c.support == Support::floor && (c.pose - task.left_slot()).norm() <= kSuccessTolerance) left = i;
    if (c.support == Support::floor && (c.pose - task.right_slot()).norm() <= kSuccessTolerance) right = i;
    if (c.support == Support::bridged && (c.pose - task.top_slot()).norm() <= kSuccessTolerance) top = i;
  }
  if (left < 0 || right < 0 || top < 0 || left == right) return false;
  const auto& below = state.cups[static_cast<std::size_t>(top)].below;
  const bool spans = (below[0] == left && below[1] == right) || (below[0] == right && below[1] == left);
  if (!spans) return false;
  const double top_of_pyramid = state.cups[static_cast<std::size_t>(top)].pose.y() + kCupHeight;
  return state.gripper.y() >= top_of_pyramid + kClearance - kEps;
}

TeacherScript::TeacherScript(const TaskSpec& task, Index steps, double hz) : steps_(steps), hz_(hz) {
  if (steps < 2 || !(hz > 0.0)) throw ConfigError("stacksim", "teacher needs steps >= 2 and hz > 0");
  const WorldState init = initial_state(task);
  std::vector<Segment> plan;
  Vec2 at = task.home();
  double ap = 1.0;
  double path = 0.0;
  auto move = [&](Vec2 to) {
    plan.push_back({0.0, (to - at).norm(), at, to, ap, ap, true});
    path += (to - at).norm();
    at = to;
  };
  auto grip = [&](double to) {
    plan.push_back({0.0, kRampSeconds, at, at, ap, to, false});
    ap = to;
    plan.push_back({0.0, kGripHoldSeconds, at, at, ap, ap, false});
  };
  const std::array<Vec2, 3> picks = {init.cups[2].pose, init.cups[1].pose, init.cups[0].pose};
  const std::array<Vec2, 3> places = {task.left_slot(), task.right_slot(), task.top_slot()};
  for (std::size_t i = 0; i < 3; ++i) {
    move({picks[i].x(), kLiftZ});
    move(picks[i]);
    grip(0.0);
    move({picks[i].x(), kLiftZ});
    move({places[i].x(), kLiftZ});
    move(places[i]);
    grip(1.0);
    move({places[i].x(), kLiftZ});
  }
  move(task.home());

  double fixed = kFinalHoldSeconds;
  for (const auto& s : plan) {
    if (!s.trapezoid) fixed += s.duration;
  }
  const double total = static_cast<double>(steps - 1) / hz;
  const double motion_time = total - fixed;
  if (!(motion_time > 0.0)) throw ConfigError("stacksim", "episode too short for the teacher script");
  // Trapezoid with accel fraction a over duration d covers peak * d * (1 - a).
  peak_speed_ = path / (motion_time * (1.0 - kAccelFraction));
  if (peak_speed_ > kTeacherMaxSpeed + 1e-12) {
    throw ConfigError("stacksim", "teacher would need peak speed " + std::to_string(peak_speed_) +
                                      " m/s; increase steps or lower hz");
  }
  double t = 0.0;
  for (auto& s : plan) {
    if (s.trapezoid) s.duration = s.duration / path * motion_time;
    s.start = t;
    t += s.duration;
  }
  segments_ = std::move(plan);
}

Command TeacherScript::sample(double time) const {
  for (const auto& s : segments_) {
    if (time >= s.start + s.duration || s.duration <= 0.0) continue;
    const double u = std::clamp((time - s.start) / s.duration, 0.0, 1.0);
    double frac = u;
    if (s.trapezoid) {
      const double a = kAccelFraction;
      const double norm = 1.0 - a;
      if (u < a) {
        frac = u * u / (2.0 * a) / norm;
      } else if (u <= 1.0 - a) {
        frac = (u - a / 2.0) / norm;
      } else {
        const double r = 1.0 - u;
        frac = 1.0 - r * r / (2.0 * a) / norm;
      }
    }
    return {s.from + (s.to - s.from) * frac, s.ap_from + (s.ap_to - s.ap_from) * frac};
  }
  const auto& last = segments_.back();
  return {last.to, last.ap_to};
}

Command TeacherScript::at(Index t) const {
  if (t < 0 || t >= steps_) {
    throw ConfigError("stacksim", "teacher step " + std::to_string(t) + " outside [0, " + std::to_string(steps_ - 1) + "]");
  }
  return sample(static_cast<double>(t) / hz_);
}

Command teacher_policy(const TaskSpec& task, Index t, Index steps, double hz) {
  return TeacherScript(task, steps, hz).at(t);
}

TeacherRun run_teacher(const TaskSpec& task, Index steps, double hz, std::uint64_t seed) {
  const TeacherScript script(task, steps, hz);
  const Index frame = kImageSide * kImageSide;
  TeacherRun run;
  data::Episode& ep = run.episode;
  ep.steps = steps;
  ep.dims = 3;
  ep.height = kImageSide;
  ep.width = kImageSide;
  ep.images.resize(steps * frame);
  ep.motions_raw.resize(steps, 3);
  WorldState s = initial_state(task);
  const double dt = 1.0 / hz;
  for (Index t = 0; t < steps; ++t) {
    ep.images.segment(t * frame, frame) = render(s);
    const Command cmd = script.at(t);
    ep.motions_raw.row(t) = cmd.to_vector().cast<float>().transpose();
    s = step_world(s, cmd, dt);
  }
  ep.bounds = data::compute_bounds(std::span<const data::Episode>(&ep, 1));
  ep.motions_norm = data::normalize(ep.motions_raw, ep.bounds);
  ep.meta = {task.position, hz, seed, std::string(kSimVersion)};
  run.final_state = s;
  run.success = check_success(s, task);
  return run;
}

}  // namespace hsarnn::sim
