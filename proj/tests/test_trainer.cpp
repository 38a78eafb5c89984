#include "doctest.h"

#include "hsarnn/error.hpp"
#include "hsarnn/stacksim.hpp"
#include "hsarnn/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

using namespace hsarnn::train;
using hsarnn::data::Episode;
namespace fs = std::filesystem;
namespace model = hsarnn::model;

namespace {

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

const std::vector<Episode>& dataset() {
  static const std::vector<Episode> d{short_episode("A"), short_episode("E")};
  return d;
}

TrainConfig quick(Index epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.lr = 1e-2;
  cfg.seed = 7;
  return cfg;
}

fs::path scratch(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "hsarnn_test_trainer";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("train config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.lr = 0.0;
  CHECK_THROWS_AS(cfg.validate(), hsarnn::ConfigError);
  cfg = {};
  cfg.clip = -1.0;
  CHECK_THROWS_AS(cfg.validate(), hsarnn::ConfigError);
  nlohmann::json j = quick(3);
  CHECK(j.get<TrainConfig>() == quick(3));
}

TEST_CASE("adam leaves a parameter alone under zero gradient") {
  Eigen::ArrayXd p = Eigen::ArrayXd::LinSpaced(5, -1.0, 1.0);
  Eigen::ArrayXd before = p;
  Eigen::ArrayXd m = Eigen::ArrayXd::Zero(5), v = Eigen::ArrayXd::Zero(5);
  adam_update(p, Eigen::ArrayXd::Zero(5), m, v, 1, TrainConfig{});
  CHECK((p == before).all());
}

TEST_CASE("adam steps saturate at lr times the gradient sign") {
  TrainConfig cfg;
  Eigen::ArrayXd g(3);
  g << 0.5, -2.0, 1e-3;
  Eigen::ArrayXd p = Eigen::ArrayXd::Zero(3), m = p, v = p;
  Eigen::ArrayXd prev = p;
  for (int t = 1; t <= 1000; ++t) {
    prev = p;
    adam_update(p, g, m, v, t, cfg);
  }
  Eigen::ArrayXd step = p - prev;
  for (int i = 0; i < 3; ++i) CHECK(std::abs(step[i] + cfg.lr * (g[i] > 0 ? 1.0 : -1.0)) <= 0.01 * cfg.lr);
}

TEST_CASE("adam minimizes a scalar quadratic") {
  TrainConfig cfg;
  cfg.lr = 0.05;
  Eigen::ArrayXd p(1), m = Eigen::ArrayXd::Zero(1), v = Eigen::ArrayXd::Zero(1);
  p << 0.0;
  const double target = 1.7;
  for (int t = 1; t <= 500; ++t) {
    Eigen::ArrayXd g = 2.0 * (p - target);
    adam_update(p, g, m, v, t, cfg);
  }
  CHECK(std::abs(p[0] - target) <= 1e-3);
}

TEST_CASE("adam rejects step zero and mismatched sizes") {
  Eigen::ArrayXd p = Eigen::ArrayXd::Zero(2), m = p, v = p;
  CHECK_THROWS_AS(adam_update(p, p, m, v, 0, TrainConfig{}), hsarnn::ConfigError);
  Eigen::ArrayXd g = Eigen::ArrayXd::Zero(3);
  CHECK_THROWS_AS(adam_update(p, g, m, v, 1, TrainConfig{}), hsarnn::ShapeError);
}

TEST_CASE("global norm clipping") {
  FloatArray a(2), b(1);
  a << 3.0f, 0.0f;
  b << 4.0f;
  std::array<FloatArray*, 2> grads{&a, &b};
  CHECK(clip_global_norm(grads, 1.0) == doctest::Approx(5.0));
  const double after = std::sqrt(a.square().sum() + b.square().sum());
  CHECK(after <= 1.0 + 1e-6);
  CHECK(a[0] == doctest::Approx(0.6f));
  FloatArray c(1);
  c << 0.5f;
  std::array<FloatArray*, 1> small{&c};
  clip_global_norm(small, 1.0);
  CHECK(c[0] == 0.5f);
}

TEST_CASE("zero epochs returns the initialization") {
  auto cfg = tiny_config(model::Variant::HSARNNST);
  auto result = train(dataset(), cfg, quick(0));
  auto init = model::init_params<float>(cfg, std::mt19937_64(7)());
  auto a = result.checkpoint.params.named();
  auto b = init.named();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK((a[i].second.data() == b[i].second.data()).all());
  for (const auto& m : result.checkpoint.adam_m) CHECK((m == 0.0f).all());
  for (const auto& v : result.checkpoint.adam_v) CHECK((v == 0.0f).all());
  CHECK(result.checkpoint.adam_step == 0);
  CHECK(result.log.empty());
}

TEST_CASE("training is deterministic and reduces the loss") {
  auto cfg = tiny_config(model::Variant::HSARNNST);
  auto a = train(dataset(), cfg, quick(30));
  auto b = train(dataset(), cfg, quick(30));
  CHECK(serialize_checkpoint(a.checkpoint) == serialize_checkpoint(b.checkpoint));
  CHECK(format_loss_log(a.log) == format_loss_log(b.log));
  REQUIRE(a.log.size() == 30);
  CHECK(a.log.back().total < a.log.front().total);
  CHECK(a.checkpoint.epoch == 30);
  CHECK(a.checkpoint.train_steps == 4);
  for (const auto& m : a.checkpoint.adam_m) CHECK(m.allFinite());
}

TEST_CASE("a non-finite loss aborts naming the epoch and term") {
  auto bad = dataset();
  bad[0].images[10] = std::numeric_limits<float>::quiet_NaN();
  try {
    train(bad, tiny_config(model::Variant::SARNN), quick(3));
    FAIL("expected an error");
  } catch (const hsarnn::Error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("epoch 1") != std::string::npos);
    CHECK(msg.find("non-finite") != std::string::npos);
  }
}

TEST_CASE("checkpoint save, load and save are byte-identical") {
  auto result = train(dataset(), tiny_config(model::Variant::SARNNST), quick(3));
  const fs::path p1 = scratch("a.hsck"), p2 = scratch("b.hsck");
  save_checkpoint(result.checkpoint, p1);
  auto loaded = load_checkpoint(p1);
  save_checkpoint(loaded, p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), {}), s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);
  CHECK(s1.substr(0, 4) == "HSCK");
  CHECK(loaded.model() == result.checkpoint.model());
  CHECK(loaded.bounds == result.checkpoint.bounds);
  CHECK(loaded.rng_state == result.checkpoint.rng_state);
}

TEST_CASE("corrupt checkpoints are rejected") {
  auto result = train(dataset(), tiny_config(model::Variant::SARNN), quick(1));
  const std::string bytes = serialize_checkpoint(result.checkpoint);
  CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 7)), hsarnn::FormatError);
  CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, 6)), hsarnn::FormatError);
  std::string magic = bytes;
  magic[0] = 'X';
  try {
    deserialize_checkpoint(magic);
    FAIL("expected FormatError");
  } catch (const hsarnn::FormatError& e) {
    CHECK(e.field() == "magic");
  }
  std::string version = bytes;
  version[4] = 9;
  try {
    deserialize_checkpoint(version);
    FAIL("expected FormatError");
  } catch (const hsarnn::FormatError& e) {
    CHECK(e.field() == "version");
  }
  CHECK_THROWS_AS(load_checkpoint(scratch("missing.hsck")), hsarnn::Error);
}

TEST_CASE("a checkpoint is bound to its variant") {
  auto result = train(dataset(), tiny_config(model::Variant::SARNN), quick(0));
  CHECK_NOTHROW(require_variant(result.checkpoint, model::Variant::SARNN));
  CHECK_THROWS_AS(require_variant(result.checkpoint, model::Variant::HSARNNST), hsarnn::ConfigError);
}

TEST_CASE("loss log csv") {
  std::vector<LossRecord> log{{1, 2.5, 1.0, 1.25, 2.5}};
  const std::string csv = format_loss_log(log);
  CHECK(csv.rfind("epoch,total,k_term,a_term,img_term\n", 0) == 0);
  CHECK(csv.find("\n1,2.5,1,1.25,2.5") != std::string::npos);
}
