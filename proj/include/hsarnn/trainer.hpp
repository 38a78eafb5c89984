#pragma once

#include "hsarnn/datastore.hpp"
#include "hsarnn/model.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace hsarnn::train {

using kernel::Index;
using FloatArray = kernel::Array<float>;

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'H', 'S', 'C', 'K'};

struct TrainConfig {
  Index epochs = 2000;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 1.0;  // global gradient norm
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);

/// One bias-corrected Adam step at step count t >= 1.
void adam_update(FloatArray& param, const FloatArray& grad, FloatArray& m, FloatArray& v, std::int64_t t,
                 const TrainConfig& cfg);
void adam_update(Eigen::ArrayXd& param, const Eigen::ArrayXd& grad, Eigen::ArrayXd& m, Eigen::ArrayXd& v,
                 std::int64_t t, const TrainConfig& cfg);

/// Scales every gradient so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_global_norm(std::span<FloatArray* const> grads, double max_norm);

struct LossRecord {
  Index epoch = 0;
  double total = 0.0;
  double k_term = 0.0;
  double a_term = 0.0;
  double img_term = 0.0;
};

struct Checkpoint {
  model::ModelParams<float> params;
  TrainConfig train;
  std::vector<FloatArray> adam_m;  // in parameter visit order
  std::vector<FloatArray> adam_v;
  std::int64_t adam_step = 0;
  Index epoch = 0;
  std::string rng_state;
  std::vector<data::Bounds> bounds;  // training-set normalization
  Index train_steps = 0;             // episode length used for training
  double hz = 10.0;

  const model::ModelConfig& model() const { return params.config; }
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LossRecord> log;
};

using ProgressFn = std::function<void(const LossRecord&)>;

/// Full-batch BPTT over every episode for cfg.epochs epochs. Motions are
/// renormalized with bounds computed over `dataset`. Throws naming the
/// epoch and loss term when a loss turns non-finite.
TrainResult train(std::span<const data::Episode> dataset, const model::ModelConfig& model_cfg,
                  const TrainConfig& cfg, const ProgressFn& progress = {});

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::string_view bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Throws ConfigError when the checkpoint was trained as another variant.
void require_variant(const Checkpoint& ckpt, model::Variant expected);

/// CSV with header epoch,total,k_term,a_term,img_term.
std::string format_loss_log(std::span<const LossRecord> log);
void write_loss_log(std::span<const LossRecord> log, const std::filesystem::path& path);

}  // namespace hsarnn::train
