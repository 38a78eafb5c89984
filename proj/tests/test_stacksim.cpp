#include "doctest.h"

#include "hsarnn/error.hpp"
#include "hsarnn/stacksim.hpp"

#include <cmath>

using namespace hsarnn::sim;

namespace {

WorldState single_cup(double y) {
  WorldState s;
  s.gripper = {y, kHomeZ};
  s.cups.push_back(Cup{Vec2(y, 0.0), Support::floor, {-1, -1}});
  return s;
}

WorldState drive(WorldState s, const Command& cmd, int ticks = 40) {
  for (int i = 0; i < ticks; ++i) s = step_world(s, cmd, 0.1);
  return s;
}

double centroid_x(const Eigen::ArrayXf& img) {
  double mass = 0.0, acc = 0.0;
  for (Index r = 0; r < kImageSide; ++r)
    for (Index c = 0; c < kImageSide; ++c) {
      const double v = img[r * kImageSide + c];
      mass += v;
      acc += v * static_cast<double>(c);
    }
  return acc / mass;
}

WorldState target_layout(const TaskSpec& task) {
  WorldState s;
  s.gripper = {task.center(), kHomeZ};
  s.cups = {Cup{task.left_slot(), Support::floor, {-1, -1}}, Cup{task.right_slot(), Support::floor, {-1, -1}},
            Cup{task.top_slot(), Support::bridged, {0, 1}}};
  return s;
}

}  // namespace

TEST_CASE("positions are 5 cm apart with taught ones 10 cm apart") {
  for (std::size_t i = 1; i < kPositions.size(); ++i)
    CHECK(position_y(kPositions[i]) - position_y(kPositions[i - 1]) == doctest::Approx(0.05));
  CHECK(position_y("C") - position_y("A") == doctest::Approx(0.10));
  CHECK(position_y("E") - position_y("C") == doctest::Approx(0.10));
  CHECK_THROWS_AS(position_y("F"), hsarnn::ConfigError);
}

TEST_CASE("holding the current pose only advances time") {
  WorldState s = initial_state(make_task("B"));
  WorldState next = step_world(s, Command{s.gripper, s.aperture}, 0.1);
  CHECK(next.time == doctest::Approx(0.1));
  next.time = s.time;
  CHECK(next == s);
}

TEST_CASE("gripper speed is limited") {
  WorldState s;
  s.gripper = {0.1, 0.2};
  WorldState next = step_world(s, Command{Vec2(0.4, 0.2), 1.0}, 0.1);
  CHECK(next.gripper.x() == doctest::Approx(0.15).epsilon(1e-12));
  CHECK(next.gripper.y() == doctest::Approx(0.2));
}

TEST_CASE("aperture slew and world clamping") {
  WorldState s;
  s.gripper = {0.25, 0.2};
  WorldState next = step_world(s, Command{Vec2(0.25, 0.2), 0.0}, 0.1);
  CHECK(next.aperture == doctest::Approx(0.6));
  WorldState far = drive(s, Command{Vec2(2.0, -1.0), 1.0});
  CHECK(far.gripper.x() == doctest::Approx(kWorldY));
  CHECK(far.gripper.y() == doctest::Approx(0.0));
  WorldState nan = step_world(s, Command{Vec2(std::nan(""), 0.1), 1.0}, 0.1);
  CHECK(nan.gripper.x() == s.gripper.x());
}

TEST_CASE("a lifted cup released in the air falls to the floor") {
  WorldState s = single_cup(0.2);
  s = drive(s, Command{Vec2(0.2, 0.0), 1.0});
  s = drive(s, Command{Vec2(0.2, 0.0), 0.0});
  REQUIRE(s.attached == 0);
  s = drive(s, Command{Vec2(0.2, 0.05), 0.0});
  CHECK(s.cups[0].pose.y() == doctest::Approx(0.05));
  s = drive(s, Command{Vec2(0.23, 0.05), 1.0});
  CHECK(s.attached == -1);
  CHECK(s.cups[0].support == Support::floor);
  CHECK(s.cups[0].pose.y() == 0.0);
  CHECK(s.cups[0].pose.x() == doctest::Approx(s.gripper.x()));
  CHECK(supports_valid(s));
}

TEST_CASE("no grasp away from a cup") {
  WorldState s = single_cup(0.2);
  s = drive(s, Command{Vec2(0.3, 0.0), 1.0});
  s = drive(s, Command{Vec2(0.3, 0.0), 0.0});
  CHECK(s.attached == -1);
}

TEST_CASE("rendering") {
  WorldState empty;
  RenderOptions no_gripper{false};
  CHECK((render(empty, no_gripper) == 0.0f).all());

  WorldState s = initial_state(make_task("C"));
  auto a = render(s);
  auto b = render(s);
  CHECK(a.size() == kImageSide * kImageSide);
  CHECK((a == b).all());
  CHECK((a >= 0.0f).all());
  CHECK((a <= 1.0f).all());

  WorldState left = single_cup(0.2), right = single_cup(0.25);
  const double shift = centroid_x(render(right, no_gripper)) - centroid_x(render(left, no_gripper));
  CHECK(std::abs(shift - 6.4) <= 1.0);
}

TEST_CASE("teacher script") {
  for (auto label : kPositions) {
    CAPTURE(label);
    TaskSpec task = make_task(label);
    TeacherScript script(task, 400, 10.0);
    Command c0 = script.at(0);
    CHECK(c0.target.x() == doctest::Approx(task.center()));
    CHECK(c0.target.y() == doctest::Approx(kHomeZ));
    CHECK(c0.aperture == 1.0);
    CHECK(script.peak_speed() <= kTeacherMaxSpeed + 1e-9);
    double worst = 0.0;
    for (Index t = 1; t < 400; ++t) worst = std::max(worst, (script.at(t).target - script.at(t - 1).target).norm());
    CHECK(worst <= 0.15 * 0.1 + 1e-12);
    CHECK_THROWS_AS(script.at(400), hsarnn::ConfigError);
    CHECK_THROWS_AS(script.at(-1), hsarnn::ConfigError);
    CHECK(teacher_policy(task, 17) == script.at(17));
  }
}

TEST_CASE("teacher succeeds everywhere at speed 1 with physical invariants") {
  for (auto label : kPositions) {
    CAPTURE(label);
    TaskSpec task = make_task(label);
    TeacherScript script(task, 400, 10.0);
    WorldState s = initial_state(task);
    for (Index t = 0; t < 400; ++t) {
      WorldState next = step_world(s, script.at(t), 0.1);
      CHECK((next.gripper - s.gripper).norm() <= kMaxSpeed * 0.1 + 1e-9);
      CHECK(next.gripper.x() >= 0.0);
      CHECK(next.gripper.x() <= kWorldY);
      CHECK(next.gripper.y() >= 0.0);
      CHECK(next.gripper.y() <= kWorldZ);
      if (next.attached >= 0) CHECK(next.cups[static_cast<std::size_t>(next.attached)].pose == next.gripper);
      CHECK(supports_valid(next));
      s = next;
    }
    CHECK(check_success(s, task));
  }
}

TEST_CASE("recorded teacher runs are deterministic") {
  auto a = run_teacher(make_task("D"), 200, 10.0, 3);
  auto b = run_teacher(make_task("D"), 200, 10.0, 3);
  CHECK(a.success);
  CHECK(a.final_state == b.final_state);
  CHECK((a.episode.images == b.episode.images).all());
  CHECK(a.episode.motions_raw == b.episode.motions_raw);
  CHECK(a.episode.steps == 200);
  CHECK(a.episode.dims == 3);
  CHECK_NOTHROW(a.episode.validate());
}

TEST_CASE("success checker") {
  TaskSpec task = make_task("C");
  WorldState exact = target_layout(task);
  CHECK(check_success(exact, task));
  WorldState off = exact;
  off.cups[0].pose.x() -= 0.03;
  CHECK_FALSE(check_success(off, task));
  WorldState closed = exact;
  closed.aperture = 0.2;
  CHECK_FALSE(check_success(closed, task));
  WorldState low = exact;
  low.gripper.y() = task.top_slot().y() + kCupHeight + 0.02;
  CHECK_FALSE(check_success(low, task));
  CHECK_FALSE(check_success(initial_state(task), task));
}
