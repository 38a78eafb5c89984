#include "hsarnn/cli.hpp"

#include "hsarnn/error.hpp"
#include "hsarnn/gradcheck_suite.hpp"
#include "hsarnn/harness.hpp"
#include "hsarnn/report.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <chrono>
#include <fstream>
#include <sstream>

namespace hsarnn::cli {

namespace fs = std::filesystem;
using harness::Index;
using nlohmann::json;

namespace {

struct Flags {
  std::uint64_t seed = 0;
  Index steps = 400;
  double hz = 10.0;
  double speed = 3.0;
  double noise = 0.0;
  double jitter = 0.01;
  Index trials = 10;
  Index epochs = 2000;
  double lr = 1e-3;
  std::vector<std::string> variants;
  std::vector<std::string> positions;
  std::string data;
  std::string ckpt;
  std::string out;
  bool teacher_oracle = false;
  bool no_train = false;
};

std::vector<model::Variant> parse_variants(const std::vector<std::string>& names) {
  std::vector<model::Variant> out;
  for (const auto& n : names) out.push_back(model::parse_variant(n));
  return out;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

json cmd_gen_data(const Flags& f) {
  harness::DatasetOptions opt;
  if (!f.positions.empty()) opt.positions = f.positions;
  opt.steps = f.steps;
  opt.hz = f.hz;
  opt.seed = f.seed;
  opt.out_dir = f.out;
  const auto files = harness::generate_dataset(opt);
  json names = json::array();
  for (const auto& p : files) names.push_back(p.string());
  return {{"files", names}, {"steps", f.steps}, {"hz", f.hz}, {"seed", f.seed}};
}

json cmd_train(const Flags& f, std::ostream& err) {
  const auto start = std::chrono::steady_clock::now();
  const auto dataset = data::read_dataset(f.data);
  if (dataset.empty()) throw ConfigError("harness", "no episodes in " + f.data);
  const model::Variant v = f.variants.empty() ? model::Variant::HSARNNST : model::parse_variant(f.variants.front());
  train::TrainConfig tc;
  tc.epochs = f.epochs;
  tc.lr = f.lr;
  tc.seed = f.seed;
  const Index every = std::max<Index>(1, f.epochs / 20);
  auto result = train::train(dataset, model::ModelConfig::defaults(v), tc, [&](const train::LossRecord& r) {
    if (r.epoch == 1 || r.epoch % every == 0) err << "epoch " << r.epoch << " loss " << r.total << "\n";
  });
  const fs::path path = f.ckpt;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  train::save_checkpoint(result.checkpoint, path);
  fs::path log_path = path;
  log_path += ".loss.csv";
  train::write_loss_log(result.log, log_path);
  json j{{"variant", model::variant_name(v)}, {"checkpoint", path.string()}, {"loss_log", log_path.string()},
         {"epochs", f.epochs}, {"episodes", dataset.size()}, {"seconds", seconds_since(start)}};
  if (!result.log.empty()) {
    j["first_loss"] = result.log.front().total;
    j["final_loss"] = result.log.back().total;
    j["loss_ratio"] = result.log.back().total / result.log.front().total;
  }
  return j;
}

json cmd_eval(const Flags& f) {
  std::vector<std::string> positions = f.positions;
  if (positions.empty()) positions.assign(sim::kPositions.begin(), sim::kPositions.end());
  std::optional<train::Checkpoint> ck;
  std::optional<model::Variant> expected;
  if (!f.variants.empty()) expected = model::parse_variant(f.variants.front());
  if (!f.teacher_oracle) {
    if (f.ckpt.empty()) throw ConfigError("harness", "eval needs --ckpt unless --teacher-oracle is given");
    ck = train::load_checkpoint(f.ckpt);
  }
  harness::AblationReport report;
  report.speed = f.speed;
  report.noise = f.noise;
  report.jitter = f.jitter;
  report.trials = f.trials;
  report.seed = f.seed;
  report.positions = positions;
  report.variants.push_back(ck ? ck->model().variant : model::Variant::HSARNNST);
  json rows = json::array();
  for (const auto& p : positions) {
    harness::ScenarioConfig sc{p, f.speed, f.noise, f.jitter, f.trials, f.seed};
    auto trials = ck ? harness::run_closed_loop(*ck, sc, expected) : harness::run_teacher_oracle(sc, f.steps, f.hz);
    double wall = 0.0;
    Index ticks = 0;
    for (const auto& t : trials) {
      for (double s : t.step_seconds) wall += s;
      ticks += static_cast<Index>(t.step_seconds.size());
    }
    harness::AblationCell cell;
    cell.variant = report.variants.front();
    cell.position = p;
    cell.trials = std::move(trials);
    cell.spread = harness::trajectory_spread(cell.trials);
    const auto rate = cell.rate();
    rows.push_back({{"position", p},
                    {"successes", cell.successes()},
                    {"trials", cell.trial_count()},
                    {"rate", rate ? json(*rate) : json(nullptr)},
                    {"sim_seconds", cell.trials.empty() ? 0.0 : cell.trials.front().sim_seconds},
                    {"mean_step_ms", ticks > 0 ? wall / static_cast<double>(ticks) * 1e3 : 0.0}});
    report.cells.push_back(std::move(cell));
  }
  if (!f.out.empty()) {
    fs::create_directories(f.out);
    std::ofstream(fs::path(f.out) / "trajectories.csv", std::ios::binary) << report::trajectories_csv(report);
  }
  return {{"mode", f.teacher_oracle ? "teacher-oracle" : "model"},
          {"variant", model::variant_name(report.variants.front())},
          {"speed", f.speed},
          {"noise", f.noise},
          {"jitter", f.jitter},
          {"seed", f.seed},
          {"positions", rows}};
}

json cmd_ablate(const Flags& f, std::ostream& err) {
  harness::AblationOptions opt;
  opt.data_dir = f.data;
  opt.ckpt_dir = f.ckpt;
  opt.out_dir = f.out;
  if (!f.variants.empty()) opt.variants = parse_variants(f.variants);
  if (!f.positions.empty()) opt.positions = f.positions;
  opt.speed = f.speed;
  opt.noise = f.noise;
  opt.jitter = f.jitter;
  opt.trials = f.trials;
  opt.seed = f.seed;
  opt.allow_training = !f.no_train;
  opt.train.epochs = f.epochs;
  opt.train.lr = f.lr;
  opt.train.seed = f.seed;
  opt.log = [&](const std::string& msg) { err << msg << "\n"; };
  const auto report = harness::evaluate_ablation(opt);
  json j = report::summary_json(report);
  j["report"] = (fs::path(f.out) / "report.csv").string();
  return j;
}

json cmd_gradcheck(const Flags& f, bool& passed) {
  gradcheck::SuiteOptions opt;
  opt.seed = f.seed;
  const auto result = gradcheck::run_suite(opt);
  json ops = json::object();
  for (const auto& e : result.entries) {
    ops[e.name] = {{"max_error", e.max_error}, {"passed", e.passed}, {"checked", e.checked},
                   {"skipped", e.skipped}, {"metric", e.metric}};
  }
  passed = result.passed;
  return {{"tolerance", opt.tolerance}, {"seconds", result.seconds}, {"passed", result.passed}, {"ops", ops}};
}

json cmd_plot(const Flags& f) {
  const fs::path in = fs::path(f.data) / "trajectories.csv";
  std::ifstream file(in, std::ios::binary);
  if (!file) throw Error("report", "cannot open " + in.string());
  std::stringstream ss;
  ss << file.rdbuf();
  const auto report = report::parse_trajectories_csv(ss.str());
  const fs::path out = f.out.empty() ? fs::path(f.data) : fs::path(f.out);
  fs::create_directories(out);
  json files = json::array();
  for (const auto& p : report.positions) {
    const fs::path svg = out / ("trajectories_" + p + ".svg");
    std::ofstream(svg, std::ios::binary) << report::trajectory_svg(report, p);
    files.push_back(svg.string());
  }
  const fs::path stats = out / "trajectory_stats.csv";
  std::ofstream(stats, std::ios::binary) << report::trajectory_stats_csv(report);
  files.push_back(stats.string());
  return {{"files", files}};
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hierarchical spatial-attention RNN toolkit", "hsarnn"};
  app.require_subcommand(1, 1);
  Flags f;

  auto* gen = app.add_subcommand("gen-data", "Record teacher demonstrations as episode files");
  gen->add_option("--positions", f.positions, "Positions A..E (default A,C,E)")->delimiter(',');
  gen->add_option("--steps", f.steps, "Steps per episode");
  gen->add_option("--hz", f.hz, "Teaching rate");
  gen->add_option("--seed", f.seed, "Seed");
  gen->add_option("--out", f.out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train one variant on a dataset directory");
  tr->add_option("--data", f.data, "Dataset directory")->required();
  tr->add_option("--variant", f.variants, "SARNN, HSARNN, SARNNST or HSARNNST")->expected(1);
  tr->add_option("--ckpt", f.ckpt, "Checkpoint path to write")->required();
  tr->add_option("--seed", f.seed, "Seed");
  tr->add_option("--epochs", f.epochs, "Epochs");
  tr->add_option("--lr", f.lr, "Adam learning rate");

  auto* ev = app.add_subcommand("eval", "Closed-loop evaluation of a checkpoint");
  ev->add_option("--ckpt", f.ckpt, "Checkpoint path");
  ev->add_option("--variant", f.variants, "Expected variant")->expected(1);
  ev->add_option("--positions", f.positions, "Positions (default A..E)")->delimiter(',');
  ev->add_option("--speed", f.speed, "Speed factor s");
  ev->add_option("--noise", f.noise, "Pixel noise sigma");
  ev->add_option("--jitter", f.jitter, "Cup jitter half-width [m]");
  ev->add_option("--trials", f.trials, "Trials per position");
  ev->add_option("--seed", f.seed, "Seed");
  ev->add_option("--steps", f.steps, "Episode length for --teacher-oracle");
  ev->add_option("--hz", f.hz, "Teaching rate for --teacher-oracle");
  ev->add_option("--out", f.out, "Directory for trajectories.csv");
  ev->add_flag("--teacher-oracle", f.teacher_oracle, "Replay the teacher instead of a model");

  auto* ab = app.add_subcommand("ablate", "Train (if needed) and evaluate every variant");
  ab->add_option("--data", f.data, "Dataset directory")->required();
  ab->add_option("--ckpt", f.ckpt, "Checkpoint directory")->required();
  ab->add_option("--out", f.out, "Report directory")->required();
  ab->add_option("--variant", f.variants, "Variants (default all)")->delimiter(',');
  ab->add_option("--positions", f.positions, "Positions (default A..E)")->delimiter(',');
  ab->add_option("--speed", f.speed, "Speed factor s");
  ab->add_option("--noise", f.noise, "Pixel noise sigma");
  ab->add_option("--jitter", f.jitter, "Cup jitter half-width [m]");
  ab->add_option("--trials", f.trials, "Trials per cell");
  ab->add_option("--seed", f.seed, "Seed");
  ab->add_option("--epochs", f.epochs, "Epochs for missing checkpoints");
  ab->add_option("--lr", f.lr, "Adam learning rate");
  ab->add_flag("--no-train", f.no_train, "Fail instead of training missing checkpoints");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gc->add_option("--seed", f.seed, "Seed");

  auto* pl = app.add_subcommand("plot", "Redraw trajectory plots from trajectories.csv");
  pl->add_option("--data", f.data, "Directory holding trajectories.csv")->required();
  pl->add_option("--out", f.out, "Output directory (default --data)");

  std::vector<const char*> argv{"hsarnn"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help() << std::flush;
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n\n" << app.help() << std::flush;
    return kExitUsage;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  json summary{{"command", command}};
  int code = kExitOk;
  try {
    json body;
    if (command == "gen-data") {
      body = cmd_gen_data(f);
    } else if (command == "train") {
      body = cmd_train(f, err);
    } else if (command == "eval") {
      body = cmd_eval(f);
    } else if (command == "ablate") {
      body = cmd_ablate(f, err);
    } else if (command == "gradcheck") {
      bool passed = false;
      body = cmd_gradcheck(f, passed);
      if (!passed) code = kExitFailure;
    } else {
      body = cmd_plot(f);
    }
    summary["status"] = code == kExitOk ? "ok" : "failed";
    summary.update(body);
  } catch (const Error& e) {
    summary["status"] = "error";
    summary["module"] = e.module();
    summary["message"] = e.what();
    code = kExitFailure;
  } catch (const std::exception& e) {
    summary["status"] = "error";
    summary["module"] = "system";
    summary["message"] = e.what();
    code = kExitFailure;
  }
  out << summary.dump() << "\n" << std::flush;
  return code;
}

}  // namespace hsarnn::cli
