#include "hsarnn/trainer.hpp"

#include "hsarnn/binio.hpp"
#include "hsarnn/error.hpp"

#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

namespace hsarnn::train {

using nlohmann::json;

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("trainer", "epochs must be >= 0");
  if (!(lr > 0.0)) throw ConfigError("trainer", "learning rate must be positive");
  if (!(clip > 0.0)) throw ConfigError("trainer", "clip norm must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("trainer", "Adam betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("trainer", "Adam epsilon must be positive");
}

void to_json(json& j, const TrainConfig& cfg) {
  j = json{{"epochs", cfg.epochs}, {"lr", cfg.lr},     {"beta1", cfg.beta1}, {"beta2", cfg.beta2},
           {"eps", cfg.eps},       {"clip", cfg.clip}, {"seed", cfg.seed}};
}

void from_json(const json& j, TrainConfig& cfg) {
  cfg.epochs = j.at("epochs").get<Index>();
  cfg.lr = j.at("lr").get<double>();
  cfg.beta1 = j.at("beta1").get<double>();
  cfg.beta2 = j.at("beta2").get<double>();
  cfg.eps = j.at("eps").get<double>();
  cfg.clip = j.at("clip").get<double>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
}

namespace {

template <typename A>
void adam_impl(A& param, const A& grad, A& m, A& v, std::int64_t t, const TrainConfig& cfg) {
  using S = typename A::Scalar;
  if (t < 1) throw ConfigError("trainer", "Adam step count must be >= 1");
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw ShapeError("adam_update", "parameter, gradient and moment sizes differ");
  }
  const auto b1 = static_cast<S>(cfg.beta1);
  const auto b2 = static_cast<S>(cfg.beta2);
  m = b1 * m + (S(1) - b1) * grad;
  v = b2 * v + (S(1) - b2) * grad.square();
  const auto c1 = static_cast<S>(1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
  const auto c2 = static_cast<S>(1.0 - std::pow(cfg.beta2, static_cast<double>(t)));
  param -= static_cast<S>(cfg.lr) * (m / c1) / ((v / c2).sqrt() + static_cast<S>(cfg.eps));
}

}  // namespace

void adam_update(FloatArray& param, const FloatArray& grad, FloatArray& m, FloatArray& v, std::int64_t t,
                 const TrainConfig& cfg) {
  adam_impl(param, grad, m, v, t, cfg);
}

void adam_update(Eigen::ArrayXd& param, const Eigen::ArrayXd& grad, Eigen::ArrayXd& m, Eigen::ArrayXd& v,
                 std::int64_t t, const TrainConfig& cfg) {
  adam_impl(param, grad, m, v, t, cfg);
}

double clip_global_norm(std::span<FloatArray* const> grads, double max_norm) {
  double sq = 0.0;
  for (const FloatArray* g : grads) sq += g->cast<double>().square().sum();
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const auto factor = static_cast<float>(max_norm / norm);
    for (FloatArray* g : grads) *g *= factor;
  }
  return norm;
}

namespace {

std::string engine_state(const std::mt19937_64& rng) {
  std::ostringstream ss;
  ss << rng;
  return ss.str();
}

void check_finite(double value, const char* term, Index epoch) {
  if (!std::isfinite(value)) {
    throw Error("trainer", std::string("non-finite ") + term + " (" + std::to_string(value) + ") at epoch " +
                               std::to_string(epoch));
  }
}

}  // namespace

TrainResult train(std::span<const data::Episode> dataset, const model::ModelConfig& model_cfg,
                  const TrainConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  model_cfg.validate();
  if (dataset.empty()) throw ConfigError("trainer", "training needs at least one episode");

  TrainResult result;
  Checkpoint& ck = result.checkpoint;
  ck.train = cfg;
  ck.bounds = data::compute_bounds(dataset);
  ck.train_steps = dataset.front().steps;
  ck.hz = dataset.front().meta.hz;
  std::vector<data::Episode> episodes;
  episodes.reserve(dataset.size());
  for (const auto& ep : dataset) episodes.push_back(data::with_bounds(ep, ck.bounds));

  std::mt19937_64 rng(cfg.seed);
  ck.params = model::init_params<float>(model_cfg, rng());
  ck.rng_state = engine_state(rng);
  auto params = ck.params.named();
  for (const auto& [name, t] : params) {
    ck.adam_m.push_back(FloatArray::Zero(t.numel()));
    ck.adam_v.push_back(FloatArray::Zero(t.numel()));
  }

  const model::TeacherBatch<float> batch = model::make_teacher_batch<float>(episodes, model_cfg);
  std::vector<FloatArray> grads(params.size());
  std::vector<FloatArray*> grad_ptrs;
  for (auto& g : grads) grad_ptrs.push_back(&g);

  for (Index epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (auto& [name, t] : params) t.zero_grad();
    model::LossTerms<float> terms = model::sequence_loss(batch, ck.params);
    LossRecord rec{epoch, static_cast<double>(terms.total.item()), terms.k_term, terms.a_term, terms.img_term};
    check_finite(rec.k_term, "k_term", epoch);
    check_finite(rec.a_term, "a_term", epoch);
    check_finite(rec.img_term, "img_term", epoch);
    check_finite(rec.total, "total", epoch);
    kernel::backprop(terms.total);
    terms = {};

    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& t = params[i].second;
      grads[i] = t.has_grad() ? t.grad() : FloatArray::Zero(t.numel());
    }
    clip_global_norm(grad_ptrs, cfg.clip);
    ++ck.adam_step;
    for (std::size_t i = 0; i < params.size(); ++i) {
      adam_update(params[i].second.mutable_data(), grads[i], ck.adam_m[i], ck.adam_v[i], ck.adam_step, cfg);
      if (!params[i].second.data().allFinite()) {
        throw Error("trainer", "parameter " + params[i].first + " became non-finite at epoch " +
                                   std::to_string(epoch));
      }
    }
    ck.epoch = epoch;
    result.log.push_back(rec);
    if (progress) progress(rec);
  }
  for (auto& [name, t] : params) t.zero_grad();
  return result;
}

namespace {

void write_tensor(binio::Writer& w, const std::string& name, const kernel::Shape& shape, const FloatArray& data) {
  w.blob(name);
  w.u32(static_cast<std::uint32_t>(shape.size()));
  for (Index d : shape) w.u32(static_cast<std::uint32_t>(d));
  w.f32s({data.data(), static_cast<std::size_t>(data.size())});
}

void read_tensor(binio::Reader& r, const std::string& expect_name, const kernel::Shape& expect_shape,
                 FloatArray& out) {
  const std::string name(r.blob("tensor_name"));
  if (name != expect_name) {
    throw FormatError("trainer", "tensor_name", "expected '" + expect_name + "', found '" + name + "'");
  }
  const std::uint32_t rank = r.u32("tensor_rank");
  if (rank != expect_shape.size()) throw FormatError("trainer", "tensor_rank", name + " has rank " + std::to_string(rank));
  for (std::size_t i = 0; i < rank; ++i) {
    const std::uint32_t d = r.u32("tensor_dims");
    if (static_cast<Index>(d) != expect_shape[i]) {
      throw FormatError("trainer", "tensor_dims", name + " dimension " + std::to_string(i) + " is " +
                                                      std::to_string(d) + ", expected " +
                                                      std::to_string(expect_shape[i]));
    }
  }
  out.resize(kernel::numel(expect_shape));
  r.f32s({out.data(), static_cast<std::size_t>(out.size())}, "tensor_data");
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ck) {
  const auto params = ck.params.named();
  if (ck.adam_m.size() != params.size() || ck.adam_v.size() != params.size()) {
    throw ConfigError("trainer", "Adam moments do not match the parameter list");
  }
  json meta;
  meta["format_version"] = kCheckpointVersion;
  meta["model"] = ck.model();
  meta["train"] = ck.train;
  meta["epoch"] = ck.epoch;
  meta["adam_step"] = ck.adam_step;
  meta["rng_state"] = ck.rng_state;
  json bounds = json::array();
  for (const auto& b : ck.bounds) bounds.push_back({b.min, b.max});
  meta["bounds"] = bounds;
  meta["train_steps"] = ck.train_steps;
  meta["hz"] = ck.hz;
  meta["tensors"] = 3 * params.size();

  binio::Writer w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  w.blob(meta.dump());
  for (const auto& [name, t] : params) write_tensor(w, name, t.shape(), t.data());
  for (std::size_t i = 0; i < params.size(); ++i) {
    write_tensor(w, "adam.m." + params[i].first, params[i].second.shape(), ck.adam_m[i]);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    write_tensor(w, "adam.v." + params[i].first, params[i].second.shape(), ck.adam_v[i]);
  }
  return w.buffer();
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
  binio::Reader r(bytes, "trainer");
  if (r.bytes(4, "magic") != std::string_view(kCheckpointMagic, 4)) {
    throw FormatError("trainer", "magic", "not an HSCK checkpoint");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("trainer", "version", "unsupported checkpoint version " + std::to_string(version));
  }
  const std::string_view text = r.blob("config_length");
  Checkpoint ck;
  model::ModelConfig model_cfg;
  std::size_t tensors = 0;
  try {
    const json meta = json::parse(text);
    if (meta.at("format_version").get<std::uint32_t>() != kCheckpointVersion) {
      throw FormatError("trainer", "format_version", "does not match header version");
    }
    model_cfg = meta.at("model").get<model::ModelConfig>();
    ck.train = meta.at("train").get<TrainConfig>();
    ck.epoch = meta.at("epoch").get<Index>();
    ck.adam_step = meta.at("adam_step").get<std::int64_t>();
    ck.rng_state = meta.at("rng_state").get<std::string>();
    for (const auto& b : meta.at("bounds")) ck.bounds.push_back({b.at(0).get<double>(), b.at(1).get<double>()});
    ck.train_steps = meta.at("train_steps").get<Index>();
    ck.hz = meta.at("hz").get<double>();
    tensors = meta.at("tensors").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError("trainer", "config", e.what());
  } catch (const ConfigError& e) {
    throw FormatError("trainer", "config", e.what());
  }
  model_cfg.validate();
  ck.params = model::zero_params<float>(model_cfg);
  auto params = ck.params.named();
  if (tensors != 3 * params.size()) {
    throw FormatError("trainer", "tensors", "declares " + std::to_string(tensors) + " tensors, model has " +
                                                std::to_string(3 * params.size()));
  }
  for (auto& [name, t] : params) {
    FloatArray data;
    read_tensor(r, name, t.shape(), data);
    t.mutable_data() = data;
  }
  ck.adam_m.resize(params.size());
  ck.adam_v.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    read_tensor(r, "adam.m." + params[i].first, params[i].second.shape(), ck.adam_m[i]);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    read_tensor(r, "adam.v." + params[i].first, params[i].second.shape(), ck.adam_v[i]);
  }
  if (!r.done()) throw FormatError("trainer", "tensors", std::to_string(r.remaining()) + " trailing bytes");
  return ck;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  binio::write_file(path, serialize_checkpoint(ckpt), "trainer");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(binio::read_file(path, "trainer"));
}

void require_variant(const Checkpoint& ckpt, model::Variant expected) {
  if (ckpt.model().variant != expected) {
    throw ConfigError("trainer", "checkpoint holds " + std::string(model::variant_name(ckpt.model().variant)) +
                                     ", expected " + std::string(model::variant_name(expected)));
  }
}

std::string format_loss_log(std::span<const LossRecord> log) {
  std::string out = "epoch,total,k_term,a_term,img_term\n";
  char line[192];
  for (const auto& r : log) {
    std::snprintf(line, sizeof line, "%lld,%.9g,%.9g,%.9g,%.9g\n", static_cast<long long>(r.epoch), r.total,
                  r.k_term, r.a_term, r.img_term);
    out += line;
  }
  return out;
}

void write_loss_log(std::span<const LossRecord> log, const std::filesystem::path& path) {
  binio::write_file(path, format_loss_log(log), "trainer");
}

}  // namespace hsarnn::train
