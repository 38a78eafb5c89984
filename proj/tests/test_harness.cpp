#include "doctest.h"

#include "hsarnn/binio.hpp"
#include "hsarnn/cli.hpp"
#include "hsarnn/error.hpp"
#include "hsarnn/harness.hpp"
#include "hsarnn/report.hpp"

#include "json.hpp"

#include <cmath>
#include <filesystem>
#include <sstream>

using namespace hsarnn::harness;
namespace fs = std::filesystem;
namespace model = hsarnn::model;
namespace train = hsarnn::train;
namespace report = hsarnn::report;
using hsarnn::data::Episode;

namespace {

fs::path scratch(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "hsarnn_test_harness" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

model::ModelConfig tiny_config(model::Variant v) {
  auto cfg = model::ModelConfig::defaults(v);
  cfg.keypoint_channels = 2;
  cfg.modality_hidden = 6;
  cfg.union_hidden = 6;
  cfg.feedback_width = 3;
  cfg.flat_hidden = 8;
  if (cfg.st) {
    cfg.st->bins = 16;
    cfg.st->sigma_bins = 1.5;
  }
  return cfg;
}

Episode short_episode(const std::string& position) {
  const Episode src = hsarnn::sim::run_teacher(hsarnn::sim::make_task(position), 200, 10.0, 0).episode;
  Episode ep = src;
  ep.steps = 4;
  ep.images.resize(4 * ep.frame_size());
  ep.motions_raw.resize(4, ep.dims);
  for (Index t = 0; t < 4; ++t) {
    ep.images.segment(t * ep.frame_size(), ep.frame_size()) = src.images.segment(t * 50 * ep.frame_size(), ep.frame_size());
    ep.motions_raw.row(t) = src.motions_raw.row(t * 50);
  }
  ep.motions_norm = hsarnn::data::normalize(ep.motions_raw, ep.bounds);
  return ep;
}

train::Checkpoint tiny_checkpoint(model::Variant v) {
  static const std::vector<Episode> data{short_episode("A"), short_episode("E")};
  train::TrainConfig tc;
  tc.epochs = 2;
  tc.lr = 1e-2;
  tc.seed = 3;
  return train::train(data, tiny_config(v), tc).checkpoint;
}

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = hsarnn::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::size_t count(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) ++n;
  return n;
}

}  // namespace

TEST_CASE("dataset generation") {
  const fs::path dir = scratch("gen");
  DatasetOptions opt;
  opt.positions = {"B"};
  opt.steps = 200;
  opt.out_dir = dir / "a";
  auto files = generate_dataset(opt);
  REQUIRE(files.size() == 1);
  CHECK(files[0].filename() == "B_0.hsep");
  auto ep = hsarnn::data::read_episode(files[0]);
  CHECK(ep.steps == 200);
  CHECK(ep.meta.position == "B");
  opt.out_dir = dir / "b";
  auto again = generate_dataset(opt);
  CHECK(hsarnn::binio::read_file(files[0], "test") == hsarnn::binio::read_file(again[0], "test"));
  opt.positions = {"Z"};
  opt.out_dir = dir / "c";
  CHECK_THROWS_AS(generate_dataset(opt), hsarnn::ConfigError);
}

TEST_CASE("simulated duration scales with the speed factor") {
  CHECK(sim_duration(400, 3.0, 10.0) == 400.0 / 30.0);
  CHECK(sim_duration(400, 1.0, 10.0) == 40.0);
}

TEST_CASE("trial engines are reproducible and distinct") {
  auto a = trial_engine(5, 2), b = trial_engine(5, 2), c = trial_engine(5, 3);
  CHECK(a() == b());
  CHECK(trial_engine(5, 2)() != c());
}

TEST_CASE("scenario validation") {
  ScenarioConfig sc;
  CHECK_NOTHROW(sc.validate());
  sc.position = "Q";
  CHECK_THROWS_AS(sc.validate(), hsarnn::ConfigError);
  sc = {};
  sc.trials = -1;
  CHECK_THROWS_AS(sc.validate(), hsarnn::ConfigError);
  sc = {};
  sc.speed = 0.5;
  CHECK_THROWS_AS(sc.validate(), hsarnn::ConfigError);
  sc = {};
  sc.noise = -0.1;
  CHECK_THROWS_AS(sc.validate(), hsarnn::ConfigError);
  nlohmann::json j = ScenarioConfig{"D", 2.0, 0.05, 0.0, 4, 9};
  auto back = j.get<ScenarioConfig>();
  CHECK(back.position == "D");
  CHECK(back.trials == 4);
}

TEST_CASE("teacher oracle succeeds at every position") {
  for (auto label : hsarnn::sim::kPositions) {
    CAPTURE(label);
    ScenarioConfig sc{std::string(label), 1.0, 0.0, 0.0, 1, 0};
    auto trials = run_teacher_oracle(sc, 400, 10.0);
    REQUIRE(trials.size() == 1);
    CHECK(trials[0].success);
    CHECK(trials[0].trajectory.rows() == 400);
    CHECK(trials[0].sim_seconds == doctest::Approx(40.0));
  }
}

TEST_CASE("closed loop is deterministic and bound to its variant") {
  const auto ck = tiny_checkpoint(model::Variant::HSARNNST);
  ScenarioConfig sc{"C", 3.0, 0.05, 0.01, 3, 11};
  auto a = run_closed_loop(ck, sc, model::Variant::HSARNNST);
  auto b = run_closed_loop(ck, sc);
  REQUIRE(a.size() == 3);
  REQUIRE(b.size() == 3);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].trajectory.rows() == ck.train_steps);
    CHECK(a[i].step_seconds.size() == static_cast<std::size_t>(ck.train_steps));
    CHECK(a[i].trajectory == b[i].trajectory);
    CHECK(a[i].offset == b[i].offset);
    CHECK(std::abs(a[i].offset) <= 0.01);
    CHECK(a[i].sim_seconds == doctest::Approx(sim_duration(ck.train_steps, 3.0, 10.0)));
    CHECK(a[i].trajectory.allFinite());
  }
  CHECK(a[0].offset != a[1].offset);
  CHECK_THROWS_AS(run_closed_loop(ck, sc, model::Variant::SARNN), hsarnn::ConfigError);
}

TEST_CASE("trajectory spread") {
  TrialResult a, b;
  a.trajectory.resize(2, 2);
  b.trajectory.resize(2, 2);
  a.trajectory << 0.0, 0.0, 1.0, 1.0;
  b.trajectory << 0.2, 0.0, 1.0, 1.4;
  std::vector<TrialResult> both{a, b};
  auto s = trajectory_spread(both);
  CHECK(s.std_y == doctest::Approx(0.05));
  CHECK(s.std_z == doctest::Approx(0.1));
  CHECK(s.spread == doctest::Approx(0.15));
  auto mean = mean_trajectory(both);
  CHECK(mean(1, 1) == doctest::Approx(1.2));
  std::vector<TrialResult> one{a};
  CHECK(std::isnan(trajectory_spread(one).spread));
  CHECK(mean_trajectory(std::span<const TrialResult>()).rows() == 0);
}

TEST_CASE("report rates follow the outcomes") {
  AblationReport r;
  r.variants = {model::Variant::SARNN};
  r.positions = {"A", "B"};
  AblationCell a{model::Variant::SARNN, "A", {}, {}};
  for (int i = 0; i < 4; ++i) {
    TrialResult t;
    t.trial = i;
    t.success = i != 0;
    a.trials.push_back(t);
  }
  AblationCell b{model::Variant::SARNN, "B", {}, {}};
  r.cells = {a, b};
  CHECK(r.cell(model::Variant::SARNN, "A").rate() == 75.0);
  CHECK_FALSE(r.cell(model::Variant::SARNN, "B").rate().has_value());
  CHECK(r.mean_rate(model::Variant::SARNN) == 75.0);
  const std::string csv = report::report_csv(r);
  CHECK(csv.rfind("variant,position,successes,trials,rate,reference_rate\n", 0) == 0);
  CHECK(csv.find("SARNN,A,3,4,75,0\n") != std::string::npos);
  CHECK(csv.find("SARNN,B,0,0,n/a,0\n") != std::string::npos);
  CHECK(csv.find("SARNN,Ave.,3,4,75,0\n") != std::string::npos);
}

TEST_CASE("published reference rates") {
  CHECK(report::reference_rate(model::Variant::SARNN, report::kAverageLabel) == 0.0);
  CHECK(report::reference_rate(model::Variant::HSARNN, report::kAverageLabel) == 52.0);
  CHECK(report::reference_rate(model::Variant::SARNNST, report::kAverageLabel) == 78.0);
  CHECK(report::reference_rate(model::Variant::HSARNNST, report::kAverageLabel) == 94.0);
  CHECK(report::reference_rate(model::Variant::HSARNNST, "C") == 90.0);
  CHECK_FALSE(report::reference_rate(model::Variant::SARNN, "Z").has_value());
  CHECK(report::format_number(std::nullopt) == "n/a");
  CHECK(report::format_number(0.1) == "0.1");
}

TEST_CASE("ablation from saved checkpoints writes a consistent report") {
  const fs::path ckpt = scratch("ckpt"), out = scratch("out");
  for (auto v : model::kAllVariants) train::save_checkpoint(tiny_checkpoint(v), checkpoint_path(ckpt, v));
  AblationOptions opt;
  opt.ckpt_dir = ckpt;
  opt.out_dir = out;
  opt.positions = {"C", "A"};
  opt.trials = 3;
  opt.noise = 0.05;
  opt.seed = 4;
  opt.allow_training = false;
  auto r = evaluate_ablation(opt);
  REQUIRE(r.cells.size() == 8);
  CHECK(r.cells[0].variant == model::kAllVariants[0]);
  CHECK(r.cells[0].position == "C");
  for (const auto& c : r.cells) {
    CHECK(c.trial_count() == 3);
    CHECK(*c.rate() == doctest::Approx(100.0 * static_cast<double>(c.successes()) / 3.0));
  }
  for (const auto* name : {"report.csv", "trajectories.csv", "trajectory_stats.csv", "trajectories_C.svg",
                           "trajectories_A.svg"})
    CHECK(fs::exists(out / name));

  const std::string svg = hsarnn::binio::read_file(out / "trajectories_C.svg", "test");
  CHECK(count(svg, "class=\"trial\"") == 3 * model::kAllVariants.size());
  CHECK(count(svg, "class=\"panel\"") == model::kAllVariants.size());
  CHECK(svg.find("The dotted line shows each of the 3 trials and the solid line shows the average trajectory.") !=
        std::string::npos);

  const std::string csv = hsarnn::binio::read_file(out / "trajectories.csv", "test");
  auto parsed = report::parse_trajectories_csv(csv);
  REQUIRE(parsed.cells.size() == r.cells.size());
  for (std::size_t i = 0; i < r.cells.size(); ++i) {
    CHECK(parsed.cells[i].successes() == r.cells[i].successes());
    CHECK((parsed.cells[i].trials[1].trajectory - r.cells[i].trials[1].trajectory).cwiseAbs().maxCoeff() <= 1e-8);
  }
  CHECK(report::trajectories_csv(parsed) == csv);

  auto again = evaluate_ablation(opt);
  CHECK(report::trajectories_csv(again) == csv);

  opt.ckpt_dir = scratch("empty");
  CHECK_THROWS_AS(evaluate_ablation(opt), hsarnn::Error);
}

TEST_CASE("cli usage errors") {
  CHECK(cli({}).code == hsarnn::cli::kExitUsage);
  CHECK(cli({"fly"}).code == hsarnn::cli::kExitUsage);
  CHECK(cli({"gen-data", "--bogus", "1"}).code == hsarnn::cli::kExitUsage);
  CHECK(cli({"gen-data"}).code == hsarnn::cli::kExitUsage);
}

TEST_CASE("cli gen-data prints one json line") {
  const fs::path dir = scratch("cli_gen");
  auto r = cli({"gen-data", "--positions", "D", "--steps", "200", "--out", dir.string()});
  CHECK(r.code == hsarnn::cli::kExitOk);
  REQUIRE(count(r.out, "\n") == 1);
  auto j = nlohmann::json::parse(r.out);
  CHECK(j["status"] == "ok");
  CHECK(j["command"] == "gen-data");
  CHECK(j["files"].size() == 1);
  CHECK(fs::exists(dir / "D_0.hsep"));
}

TEST_CASE("cli reports module errors as json") {
  auto r = cli({"gen-data", "--positions", "Z", "--out", scratch("cli_bad").string()});
  CHECK(r.code == hsarnn::cli::kExitFailure);
  auto j = nlohmann::json::parse(r.out);
  CHECK(j["status"] == "error");
  CHECK(j["module"] == "harness");
  CHECK(j["message"].get<std::string>().find("Z") != std::string::npos);

  auto missing = cli({"train", "--data", scratch("cli_empty").string(), "--ckpt", "x.hsck"});
  CHECK(missing.code == hsarnn::cli::kExitFailure);
  CHECK(nlohmann::json::parse(missing.out)["status"] == "error");

  auto no_train = cli({"ablate", "--data", scratch("cli_nodata").string(), "--ckpt", scratch("cli_nockpt").string(),
                       "--out", scratch("cli_noout").string(), "--no-train", "--trials", "1"});
  CHECK(no_train.code == hsarnn::cli::kExitFailure);
}

TEST_CASE("cli eval with the teacher oracle") {
  auto r = cli({"eval", "--teacher-oracle", "--positions", "A,E", "--speed", "1", "--jitter", "0", "--trials", "1"});
  CHECK(r.code == hsarnn::cli::kExitOk);
  auto j = nlohmann::json::parse(r.out);
  REQUIRE(j["positions"].size() == 2);
  for (const auto& row : j["positions"]) CHECK(row["rate"] == 100.0);
}

TEST_CASE("cli plot rebuilds figures from trajectories") {
  const fs::path dir = scratch("cli_plot");
  auto e = cli({"eval", "--teacher-oracle", "--positions", "B", "--speed", "1", "--trials", "2", "--out",
                dir.string()});
  REQUIRE(e.code == hsarnn::cli::kExitOk);
  auto p = cli({"plot", "--data", dir.string()});
  CHECK(p.code == hsarnn::cli::kExitOk);
  CHECK(fs::exists(dir / "trajectories_B.svg"));
  CHECK(fs::exists(dir / "trajectory_stats.csv"));
  const std::string svg = hsarnn::binio::read_file(dir / "trajectories_B.svg", "test");
  CHECK(count(svg, "class=\"trial\"") == 2);
  CHECK(cli({"plot", "--data", scratch("cli_plot_empty").string()}).code == hsarnn::cli::kExitFailure);
}
