#pragma once

#include "hsarnn/blocks.hpp"
#include "hsarnn/datastore.hpp"
#include "hsarnn/stcodec.hpp"

#include "json.hpp"

#include <array>
#include <optional>
#include <span>
#include <string_view>
#include <variant>
#include <vector>

namespace hsarnn::model {

using kernel::Index;
using kernel::Shape;
using kernel::Tensor;

/// "H" prefix: hierarchical RNN. "ST" suffix: Softmax Transformation head.
enum class Variant { SARNN, HSARNN, SARNNST, HSARNNST };

inline constexpr std::array<Variant, 4> kAllVariants = {Variant::SARNN, Variant::HSARNN, Variant::SARNNST,
                                                        Variant::HSARNNST};

constexpr bool is_hierarchical(Variant v) { return v == Variant::HSARNN || v == Variant::HSARNNST; }
constexpr bool uses_st(Variant v) { return v == Variant::SARNNST || v == Variant::HSARNNST; }

std::string_view variant_name(Variant v);
/// Throws ConfigError for an unknown name.
Variant parse_variant(std::string_view name);

struct ModelConfig {
  Variant variant = Variant::HSARNNST;
  Index motion_dims = 3;
  Index keypoint_channels = 8;
  Index modality_hidden = 64;
  Index union_hidden = 64;
  Index feedback_width = 16;
  Index flat_hidden = 128;
  std::optional<st::StCodecConfig> st;  // present iff the variant uses ST
  double w_k = 1.0;
  double w_a = 1.0;
  double w_img = 0.1;

  /// Defaults for `v`, with the codec attached for ST variants.
  static ModelConfig defaults(Variant v);
  void validate() const;
  Index keypoint_dims() const { return 2 * keypoint_channels; }
  /// Width of the motion head: D, or D * bins for ST.
  Index motion_outputs() const;

  bool operator==(const ModelConfig&) const;
};

void to_json(nlohmann::json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);

template <typename Scalar>
struct HierarchicalParams {
  blocks::LstmCellParams<Scalar> vision;
  blocks::LstmCellParams<Scalar> motion;
  blocks::LstmCellParams<Scalar> union_rnn;
  blocks::LinearParams<Scalar> feedback_vision;
  blocks::LinearParams<Scalar> feedback_motion;
};

template <typename Scalar>
struct FlatParams {
  blocks::LstmCellParams<Scalar> lstm;
};

template <typename Scalar>
struct ModelParams {
  ModelConfig config;
  blocks::ConvEncoderParams<Scalar> encoder;
  blocks::ConvDecoderParams<Scalar> decoder;
  std::optional<HierarchicalParams<Scalar>> hier;
  std::optional<FlatParams<Scalar>> flat;
  blocks::LinearParams<Scalar> keypoint_head;
  blocks::LinearParams<Scalar> motion_head;

  /// Visits every parameter tensor in a fixed order with a dotted name.
  void visit(const blocks::ParamVisitor<Scalar>& fn);
  /// Name/handle pairs in visit order. Handles share storage with `*this`.
  std::vector<std::pair<std::string, Tensor<Scalar>>> named() const;
  Index parameter_count() const;
};

template <typename Scalar>
ModelParams<Scalar> init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Same layout as init_params with every weight and bias set to zero.
template <typename Scalar>
ModelParams<Scalar> zero_params(const ModelConfig& cfg);

/// Deep copy in another precision. Gradient tracking is preserved.
template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& src) {
  ModelParams<To> out = zero_params<To>(src.config);
  auto from = src.named();
  std::size_t i = 0;
  out.visit([&](const std::string&, Tensor<To>& t) {
    const auto& s = from[i++].second;
    t = kernel::cast<To>(s, s.requires_grad());
  });
  return out;
}

template <typename Scalar>
struct HierState {
  Tensor<Scalar> h_v, c_v, h_m, c_m, h_u, c_u, feedback_v, feedback_m;
};

template <typename Scalar>
struct FlatState {
  Tensor<Scalar> h, c;
};

/// Recurrent state for a batch of sequences. Holds the alternative that
/// matches the variant.
template <typename Scalar>
using ModelState = std::variant<HierState<Scalar>, FlatState<Scalar>>;

template <typename Scalar>
ModelState<Scalar> zero_state(const ModelConfig& cfg, Index batch = 1);

/// Copy of the state with every tensor cut from its graph.
template <typename Scalar>
ModelState<Scalar> detach_state(const ModelState<Scalar>& state);

template <typename Scalar>
struct StepOutput {
  Tensor<Scalar> keypoints;       // k_t from the encoder [N, 2C]
  Tensor<Scalar> keypoints_next;  // predicted k_{t+1} [N, 2C]
  Tensor<Scalar> motion_next;     // predicted a_{t+1} [N, D]; decoded bin centers for ST
  Tensor<Scalar> motion_logits;   // ST only: [N, D, bins]
  Tensor<Scalar> image_next;      // predicted i_{t+1} [N, 1, 64, 64], unless skipped
  ModelState<Scalar> state;
};

struct StepOptions {
  bool decode_image = true;
};

/// One control tick. image [1,64,64] or [N,1,64,64]; motion [D] or [N,D]
/// normalized to [-1, 1]. Outputs are always batched ([1, ...] for an
/// unbatched input). Throws ConfigError if the state does not match
/// the variant.
template <typename Scalar>
StepOutput<Scalar> model_step(const Tensor<Scalar>& image, const Tensor<Scalar>& motion,
                              const ModelState<Scalar>& state, const ModelParams<Scalar>& params,
                              const StepOptions& options = {});

/// Teacher-forcing data for a batch of equal-length episodes, stored time
/// major: row t * N + n holds episode n at step t.
template <typename Scalar>
struct TeacherBatch {
  Index steps = 0;
  Index batch = 0;
  Tensor<Scalar> images;   // [T*N, 1, 64, 64]
  Tensor<Scalar> motions;  // [T*N, D]
  Tensor<Scalar> st_targets;  // ST only: [(T-1)*N*D, bins], targets for steps 1..T-1
  std::size_t clamped = 0;    // motions clamped by the codec
  /// Optional fixed keypoint targets [(T-1)*N, 2C]. When undefined the
  /// encoder's own next-frame keypoints are used with the gradient stopped.
  Tensor<Scalar> key_targets;
};

/// Next-frame keypoints of `batch` under the current encoder, detached.
template <typename Scalar>
Tensor<Scalar> frozen_key_targets(const TeacherBatch<Scalar>& batch, const ModelParams<Scalar>& params);

template <typename Scalar>
TeacherBatch<Scalar> make_teacher_batch(std::span<const data::Episode> episodes, const ModelConfig& cfg);

template <typename Scalar>
struct LossTerms {
  Tensor<Scalar> total;  // w_k * k_term + w_a * a_term + w_img * img_term
  double k_term = 0.0;
  double a_term = 0.0;
  double img_term = 0.0;
};

/// Teacher-forced loss over t = 0..T-2, averaged over time and batch.
/// Keypoint targets are the encoder's own next-frame keypoints with the
/// gradient stopped.
template <typename Scalar>
LossTerms<Scalar> sequence_loss(const TeacherBatch<Scalar>& batch, const ModelParams<Scalar>& params);

template <typename Scalar>
LossTerms<Scalar> sequence_loss(const data::Episode& episode, const ModelParams<Scalar>& params);

/// Feeds the model its own decoded motion while the images come from the
/// episode. Row t is the prediction for step t + 1. steps <= T - 1.
template <typename Scalar>
Eigen::MatrixXd rollout_open_loop(const data::Episode& episode, Index steps, const ModelParams<Scalar>& params);

/// RMSE between rollout rows and the episode's normalized motions 1..steps.
double motion_rmse(const Eigen::MatrixXd& rollout, const data::Episode& episode);

}  // namespace hsarnn::model
