#include "hsarnn/harness.hpp"

#include "hsarnn/error.hpp"
#include "hsarnn/report.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace hsarnn::harness {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_position(std::string_view label) {
  if (std::find(sim::kPositions.begin(), sim::kPositions.end(), label) == sim::kPositions.end()) {
    throw ConfigError("harness", "unknown position '" + std::string(label) + "', expected A..E");
  }
}

double draw_offset(std::mt19937_64& rng, double jitter) {
  if (jitter <= 0.0) return 0.0;
  return std::uniform_real_distribution<double>(-jitter, jitter)(rng);
}

void add_noise(Eigen::ArrayXf& image, double sigma, std::mt19937_64& rng) {
  if (sigma <= 0.0) return;
  std::normal_distribution<double> n(0.0, sigma);
  for (auto& px : image) px = static_cast<float>(std::clamp(static_cast<double>(px) + n(rng), 0.0, 1.0));
}

/// One trial: `policy(t, world)` returns the command applied on tick t.
template <typename Policy>
TrialResult run_trial(const ScenarioConfig& sc, Index trial, Index steps, double hz, Policy&& policy) {
  TrialResult r;
  r.position = sc.position;
  r.speed = sc.speed;
  r.noise = sc.noise;
  r.trial = trial;
  auto rng = trial_engine(sc.seed, trial);
  r.offset = draw_offset(rng, sc.jitter);
  const sim::TaskSpec task = sim::make_task(sc.position, r.offset);
  sim::WorldState world = sim::initial_state(task);
  const double dt = 1.0 / (sc.speed * hz);
  r.trajectory.resize(steps, 2);
  r.step_seconds.reserve(static_cast<std::size_t>(steps));
  policy.reset(task);
  for (Index t = 0; t < steps; ++t) {
    Eigen::ArrayXf image = sim::render(world);
    add_noise(image, sc.noise, rng);
    const auto start = std::chrono::steady_clock::now();
    const sim::Command cmd = policy(t, image);
    r.step_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    world = sim::step_world(world, cmd, dt);
    r.trajectory.row(t) = world.gripper.transpose();
  }
  r.sim_seconds = sim_duration(steps, sc.speed, hz);
  r.success = sim::check_success(world, task);
  return r;
}

struct ModelPolicy {
  const train::Checkpoint& ckpt;
  model::ModelState<float> state;
  kernel::Array<float> motion;

  void reset(const sim::TaskSpec& task) {
    state = model::zero_state<float>(ckpt.model(), 1);
    const sim::Command home{task.home(), 1.0};
    const Eigen::Vector3d raw = home.to_vector();
    motion.resize(ckpt.model().motion_dims);
    for (Index j = 0; j < motion.size(); ++j) {
      motion[j] = static_cast<float>(data::normalize_value(raw[j], ckpt.bounds[static_cast<std::size_t>(j)]));
    }
  }

  sim::Command operator()(Index, const Eigen::ArrayXf& image) {
    const kernel::Tensor<float> img({1, sim::kImageSide, sim::kImageSide}, image);
    const kernel::Tensor<float> a({motion.size()}, motion);
    auto out = model::model_step(img, a, state, ckpt.params, model::StepOptions{false});
    state = std::move(out.state);
    motion = out.motion_next.data();
    Eigen::Vector3d raw;
    for (Index j = 0; j < 3; ++j) {
      raw[j] = data::denormalize_value(static_cast<double>(motion[j]), ckpt.bounds[static_cast<std::size_t>(j)]);
    }
    return sim::Command::from_vector(raw);
  }
};

struct TeacherPolicy {
  Index steps;
  double hz;
  std::optional<sim::TeacherScript> script;

  void reset(const sim::TaskSpec& task) { script.emplace(task, steps, hz); }

  sim::Command operator()(Index t, const Eigen::ArrayXf&) { return script->at(std::min(t + 1, steps - 1)); }
};

}  // namespace

std::vector<fs::path> generate_dataset(const DatasetOptions& options) {
  if (options.positions.empty()) throw ConfigError("harness", "no positions given");
  if (options.out_dir.empty()) throw ConfigError("harness", "no output directory given");
  std::vector<sim::TeacherRun> runs;
  for (const auto& p : options.positions) {
    check_position(p);
    runs.push_back(sim::run_teacher(sim::make_task(p), options.steps, options.hz, options.seed));
    if (!runs.back().success) {
      throw Error("harness", "teacher failed at position " + p + "; simulator regression");
    }
  }
  fs::create_directories(options.out_dir);
  std::vector<fs::path> written;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const fs::path path = options.out_dir / data::episode_filename(options.positions[i], options.seed);
    data::write_episode(runs[i].episode, path);
    written.push_back(path);
  }
  return written;
}

void ScenarioConfig::validate() const {
  check_position(position);
  if (!(speed >= 1.0)) throw ConfigError("harness", "speed factor must be >= 1");
  if (!(noise >= 0.0)) throw ConfigError("harness", "noise sigma must be >= 0");
  if (!(jitter >= 0.0)) throw ConfigError("harness", "jitter must be >= 0");
  if (trials < 0) throw ConfigError("harness", "trials must be >= 0");
}

void to_json(json& j, const ScenarioConfig& sc) {
  j = json{{"position", sc.position}, {"speed", sc.speed},   {"noise", sc.noise},
           {"jitter", sc.jitter},     {"trials", sc.trials}, {"seed", sc.seed}};
}

void from_json(const json& j, ScenarioConfig& sc) {
  sc.position = j.at("position").get<std::string>();
  sc.speed = j.at("speed").get<double>();
  sc.noise = j.at("noise").get<double>();
  sc.jitter = j.at("jitter").get<double>();
  sc.trials = j.at("trials").get<Index>();
  sc.seed = j.at("seed").get<std::uint64_t>();
}

double sim_duration(Index steps, double speed, double hz) {
  return static_cast<double>(steps) / (speed * hz);
}

std::mt19937_64 trial_engine(std::uint64_t seed, Index trial) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(trial), static_cast<std::uint32_t>(static_cast<std::uint64_t>(trial) >> 32)};
  return std::mt19937_64(seq);
}

std::vector<TrialResult> run_closed_loop(const train::Checkpoint& ckpt, const ScenarioConfig& scenario,
                                         std::optional<model::Variant> expected) {
  scenario.validate();
  if (expected) train::require_variant(ckpt, *expected);
  if (ckpt.model().motion_dims != 3 || ckpt.bounds.size() != 3) {
    throw ConfigError("harness", "closed loop needs a 3-dimensional motion model");
  }
  if (ckpt.train_steps < 1) throw ConfigError("harness", "checkpoint has no training episode length");
  const kernel::NoGradGuard no_grad;
  std::vector<TrialResult> out;
  for (Index i = 0; i < scenario.trials; ++i) {
    ModelPolicy policy{ckpt, {}, {}};
    out.push_back(run_trial(scenario, i, ckpt.train_steps, ckpt.hz, policy));
  }
  return out;
}

std::vector<TrialResult> run_teacher_oracle(const ScenarioConfig& scenario, Index steps, double hz) {
  scenario.validate();
  std::vector<TrialResult> out;
  for (Index i = 0; i < scenario.trials; ++i) {
    TeacherPolicy policy{steps, hz, std::nullopt};
    out.push_back(run_trial(scenario, i, steps, hz, policy));
  }
  return out;
}

TrajectorySpread trajectory_spread(std::span<const TrialResult> trials) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  if (trials.size() < 2) return {nan, nan, nan};
  const Index steps = trials.front().trajectory.rows();
  for (const auto& t : trials) {
    if (t.trajectory.rows() != steps) throw ConfigError("harness", "trajectories differ in length");
  }
  if (steps == 0) return {nan, nan, nan};
  const Eigen::MatrixX2d mean = mean_trajectory(trials);
  Eigen::MatrixX2d var = Eigen::MatrixX2d::Zero(steps, 2);
  for (const auto& t : trials) var += (t.trajectory - mean).array().square().matrix();
  var /= static_cast<double>(trials.size());
  TrajectorySpread s;
  s.std_y = var.col(0).array().sqrt().mean();
  s.std_z = var.col(1).array().sqrt().mean();
  s.spread = var.rowwise().sum().array().sqrt().mean();
  return s;
}

Eigen::MatrixX2d mean_trajectory(std::span<const TrialResult> trials) {
  if (trials.empty()) return {};
  Eigen::MatrixX2d mean = Eigen::MatrixX2d::Zero(trials.front().trajectory.rows(), 2);
  for (const auto& t : trials) mean += t.trajectory;
  return mean / static_cast<double>(trials.size());
}

Index AblationCell::successes() const {
  return static_cast<Index>(std::count_if(trials.begin(), trials.end(), [](const TrialResult& t) { return t.success; }));
}

std::optional<double> AblationCell::rate() const {
  if (trials.empty()) return std::nullopt;
  return static_cast<double>(successes()) / static_cast<double>(trials.size()) * 100.0;
}

const AblationCell& AblationReport::cell(model::Variant v, const std::string& position) const {
  for (const auto& c : cells) {
    if (c.variant == v && c.position == position) return c;
  }
  throw ConfigError("harness", "no cell for " + std::string(model::variant_name(v)) + " at " + position);
}

std::optional<double> AblationReport::mean_rate(model::Variant v) const {
  double sum = 0.0;
  int n = 0;
  for (const auto& c : cells) {
    if (c.variant != v) continue;
    if (auto r = c.rate()) {
      sum += *r;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

TrendFlags AblationReport::trends() const {
  auto has = [&](model::Variant v) { return std::find(variants.begin(), variants.end(), v) != variants.end(); };
  auto ge = [&](model::Variant a, model::Variant b) -> std::optional<bool> {
    if (!has(a) || !has(b)) return std::nullopt;
    const auto ra = mean_rate(a);
    const auto rb = mean_rate(b);
    if (!ra || !rb) return std::nullopt;
    return *ra >= *rb;
  };
  TrendFlags f;
  f.hsarnnst_ge_sarnn = ge(model::Variant::HSARNNST, model::Variant::SARNN);
  f.hsarnnst_ge_sarnnst = ge(model::Variant::HSARNNST, model::Variant::SARNNST);
  f.sarnnst_ge_hsarnn = ge(model::Variant::SARNNST, model::Variant::HSARNN);
  const bool has_c = std::find(positions.begin(), positions.end(), "C") != positions.end();
  if (has_c && has(model::Variant::SARNNST) && has(model::Variant::SARNN)) {
    const double st = cell(model::Variant::SARNNST, "C").spread.spread;
    const double flat = cell(model::Variant::SARNN, "C").spread.spread;
    if (std::isfinite(st) && std::isfinite(flat)) f.st_spread_le_flat_at_c = st <= flat;
  }
  return f;
}

fs::path checkpoint_path(const fs::path& dir, model::Variant v) {
  return dir / (std::string(model::variant_name(v)) + std::string(kCheckpointExtension));
}

train::Checkpoint ensure_checkpoint(const AblationOptions& options, model::Variant v) {
  const fs::path path = checkpoint_path(options.ckpt_dir, v);
  if (fs::exists(path)) {
    train::Checkpoint ck = train::load_checkpoint(path);
    train::require_variant(ck, v);
    return ck;
  }
  if (!options.allow_training) {
    throw ConfigError("harness", "missing checkpoint " + path.string() + " and training is disabled");
  }
  const auto dataset = data::read_dataset(options.data_dir);
  if (dataset.empty()) throw ConfigError("harness", "no episodes in " + options.data_dir.string());
  if (options.log) options.log("training " + std::string(model::variant_name(v)));
  auto result = train::train(dataset, model::ModelConfig::defaults(v), options.train);
  fs::create_directories(options.ckpt_dir);
  train::save_checkpoint(result.checkpoint, path);
  fs::path log_path = path;
  log_path += ".loss.csv";
  train::write_loss_log(result.log, log_path);
  return std::move(result.checkpoint);
}

AblationReport evaluate_ablation(const AblationOptions& options) {
  if (options.trials < 0) throw ConfigError("harness", "trials must be >= 0");
  for (const auto& p : options.positions) check_position(p);
  AblationReport report;
  report.speed = options.speed;
  report.noise = options.noise;
  report.jitter = options.jitter;
  report.trials = options.trials;
  report.seed = options.seed;
  report.variants = options.variants;
  report.positions = options.positions;
  for (model::Variant v : options.variants) {
    const train::Checkpoint ck = ensure_checkpoint(options, v);
    for (const auto& p : options.positions) {
      ScenarioConfig sc{p, options.speed, options.noise, options.jitter, options.trials, options.seed};
      AblationCell cell;
      cell.variant = v;
      cell.position = p;
      cell.trials = run_closed_loop(ck, sc, v);
      cell.spread = trajectory_spread(cell.trials);
      if (options.log) {
        options.log(std::string(model::variant_name(v)) + " " + p + ": " + std::to_string(cell.successes()) + "/" +
                    std::to_string(cell.trial_count()));
      }
      report.cells.push_back(std::move(cell));
    }
  }
  if (!options.out_dir.empty()) report::write_report(report, options.out_dir);
  return report;
}

}  // namespace hsarnn::harness
