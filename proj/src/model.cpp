#include "hsarnn/model.hpp"

#include "hsarnn/error.hpp"

#include <cmath>

namespace hsarnn::model {

using nlohmann::json;
namespace k = kernel;

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::SARNN: return "SARNN";
    case Variant::HSARNN: return "HSARNN";
    case Variant::SARNNST: return "SARNNST";
    case Variant::HSARNNST: return "HSARNNST";
  }
  return "?";
}

Variant parse_variant(std::string_view name) {
  for (Variant v : kAllVariants) {
    if (variant_name(v) == name) return v;
  }
  throw ConfigError("model", "unknown variant '" + std::string(name) + "'");
}

ModelConfig ModelConfig::defaults(Variant v) {
  ModelConfig cfg;
  cfg.variant = v;
  if (uses_st(v)) cfg.st = st::StCodecConfig{};
  return cfg;
}

void ModelConfig::validate() const {
  if (motion_dims < 1 || keypoint_channels < 1 || modality_hidden < 1 || union_hidden < 1 || feedback_width < 1 ||
      flat_hidden < 1) {
    throw ConfigError("model", "all layer sizes must be positive");
  }
  if (uses_st(variant) != st.has_value()) {
    throw ConfigError("model", std::string(variant_name(variant)) +
                                   (st ? " must not carry a codec config" : " requires a codec config"));
  }
  if (st) st->validate();
  if (!(w_k >= 0.0) || !(w_a >= 0.0) || !(w_img >= 0.0)) throw ConfigError("model", "loss weights must be >= 0");
}

Index ModelConfig::motion_outputs() const { return st ? motion_dims * st->bins : motion_dims; }

bool ModelConfig::operator==(const ModelConfig& o) const {
  return variant == o.variant && motion_dims == o.motion_dims && keypoint_channels == o.keypoint_channels &&
         modality_hidden == o.modality_hidden && union_hidden == o.union_hidden &&
         feedback_width == o.feedback_width && flat_hidden == o.flat_hidden && st == o.st && w_k == o.w_k &&
         w_a == o.w_a && w_img == o.w_img;
}

void to_json(json& j, const ModelConfig& cfg) {
  j = json{{"variant", variant_name(cfg.variant)},
           {"motion_dims", cfg.motion_dims},
           {"keypoint_channels", cfg.keypoint_channels},
           {"modality_hidden", cfg.modality_hidden},
           {"union_hidden", cfg.union_hidden},
           {"feedback_width", cfg.feedback_width},
           {"flat_hidden", cfg.flat_hidden},
           {"w_k", cfg.w_k},
           {"w_a", cfg.w_a},
           {"w_img", cfg.w_img}};
  if (cfg.st) {
    j["st"] = {{"bins", cfg.st->bins}, {"lo", cfg.st->lo}, {"hi", cfg.st->hi}, {"sigma_bins", cfg.st->sigma_bins}};
  } else {
    j["st"] = nullptr;
  }
}

void from_json(const json& j, ModelConfig& cfg) {
  cfg.variant = parse_variant(j.at("variant").get<std::string>());
  cfg.motion_dims = j.at("motion_dims").get<Index>();
  cfg.keypoint_channels = j.at("keypoint_channels").get<Index>();
  cfg.modality_hidden = j.at("modality_hidden").get<Index>();
  cfg.union_hidden = j.at("union_hidden").get<Index>();
  cfg.feedback_width = j.at("feedback_width").get<Index>();
  cfg.flat_hidden = j.at("flat_hidden").get<Index>();
  cfg.w_k = j.at("w_k").get<double>();
  cfg.w_a = j.at("w_a").get<double>();
  cfg.w_img = j.at("w_img").get<double>();
  const json& s = j.at("st");
  if (s.is_null()) {
    cfg.st.reset();
  } else {
    cfg.st = st::StCodecConfig{s.at("bins").get<Index>(), s.at("lo").get<double>(), s.at("hi").get<double>(),
                               s.at("sigma_bins").get<double>()};
  }
}

template <typename Scalar>
void ModelParams<Scalar>::visit(const blocks::ParamVisitor<Scalar>& fn) {
  encoder.visit("encoder", fn);
  decoder.visit("decoder", fn);
  if (hier) {
    hier->vision.visit("vision", fn);
    hier->motion.visit("motion", fn);
    hier->union_rnn.visit("union", fn);
    hier->feedback_vision.visit("feedback_vision", fn);
    hier->feedback_motion.visit("feedback_motion", fn);
  }
  if (flat) flat->lstm.visit("lstm", fn);
  keypoint_head.visit("keypoint_head", fn);
  motion_head.visit("motion_head", fn);
}

template <typename Scalar>
std::vector<std::pair<std::string, Tensor<Scalar>>> ModelParams<Scalar>::named() const {
  std::vector<std::pair<std::string, Tensor<Scalar>>> out;
  const_cast<ModelParams*>(this)->visit([&](const std::string& name, Tensor<Scalar>& t) { out.emplace_back(name, t); });
  return out;
}

template <typename Scalar>
Index ModelParams<Scalar>::parameter_count() const {
  Index n = 0;
  for (const auto& [name, t] : named()) n += t.numel();
  return n;
}

template <typename Scalar>
ModelParams<Scalar> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  blocks::Initializer init(seed);
  ModelParams<Scalar> p;
  p.config = cfg;
  const Index kd = cfg.keypoint_dims();
  p.encoder = blocks::ConvEncoderParams<Scalar>::init(cfg.keypoint_channels, init);
  p.decoder = blocks::ConvDecoderParams<Scalar>::init(cfg.keypoint_channels, init);
  Index head_in = cfg.flat_hidden;
  if (is_hierarchical(cfg.variant)) {
    const Index hm = cfg.modality_hidden;
    const Index f = cfg.feedback_width;
    HierarchicalParams<Scalar> h;
    h.vision = blocks::LstmCellParams<Scalar>::init(kd + f, hm, init);
    h.motion = blocks::LstmCellParams<Scalar>::init(cfg.motion_dims + f, hm, init);
    h.union_rnn = blocks::LstmCellParams<Scalar>::init(2 * hm, cfg.union_hidden, init);
    h.feedback_vision = blocks::LinearParams<Scalar>::init(cfg.union_hidden, f, init);
    h.feedback_motion = blocks::LinearParams<Scalar>::init(cfg.union_hidden, f, init);
    p.hier = std::move(h);
    head_in = hm;
  } else {
    p.flat = FlatParams<Scalar>{blocks::LstmCellParams<Scalar>::init(kd + cfg.motion_dims, cfg.flat_hidden, init)};
  }
  p.keypoint_head = blocks::LinearParams<Scalar>::init(head_in, kd, init);
  p.motion_head = blocks::LinearParams<Scalar>::init(head_in, cfg.motion_outputs(), init);
  return p;
}

template <typename Scalar>
ModelParams<Scalar> zero_params(const ModelConfig& cfg) {
  ModelParams<Scalar> p = init_params<Scalar>(cfg, 0);
  p.visit([](const std::string&, Tensor<Scalar>& t) { t.mutable_data().setZero(); });
  return p;
}

template <typename Scalar>
ModelState<Scalar> zero_state(const ModelConfig& cfg, Index batch) {
  auto z = [batch](Index width) { return Tensor<Scalar>::zeros({batch, width}); };
  if (is_hierarchical(cfg.variant)) {
    const Index hm = cfg.modality_hidden;
    const Index hu = cfg.union_hidden;
    const Index f = cfg.feedback_width;
    return HierState<Scalar>{z(hm), z(hm), z(hm), z(hm), z(hu), z(hu), z(f), z(f)};
  }
  return FlatState<Scalar>{z(cfg.flat_hidden), z(cfg.flat_hidden)};
}

template <typename Scalar>
ModelState<Scalar> detach_state(const ModelState<Scalar>& state) {
  if (const auto* h = std::get_if<HierState<Scalar>>(&state)) {
    return HierState<Scalar>{h->h_v.detach(), h->c_v.detach(), h->h_m.detach(), h->c_m.detach(),
                             h->h_u.detach(), h->c_u.detach(), h->feedback_v.detach(), h->feedback_m.detach()};
  }
  const auto& f = std::get<FlatState<Scalar>>(state);
  return FlatState<Scalar>{f.h.detach(), f.c.detach()};
}

namespace {

template <typename Scalar>
struct CoreOut {
  Tensor<Scalar> key_hidden;
  Tensor<Scalar> motion_hidden;
  ModelState<Scalar> state;
};

void check_state_shape(const char* what, const Shape& got, Index batch, Index width) {
  if (got != Shape{batch, width}) {
    throw ConfigError("model", std::string("state tensor ") + what + " has shape " + k::shape_string(got) +
                                   ", expected " + k::shape_string({batch, width}));
  }
}

template <typename Scalar>
void check_state(const ModelState<Scalar>& state, const ModelConfig& cfg, Index batch) {
  const bool hier = is_hierarchical(cfg.variant);
  if (hier != std::holds_alternative<HierState<Scalar>>(state)) {
    throw ConfigError("model", std::string(hier ? "flat" : "hierarchical") + " state passed to " +
                                   std::string(variant_name(cfg.variant)));
  }
  if (hier) {
    const auto& s = std::get<HierState<Scalar>>(state);
    check_state_shape("h_v", s.h_v.shape(), batch, cfg.modality_hidden);
    check_state_shape("c_v", s.c_v.shape(), batch, cfg.modality_hidden);
    check_state_shape("h_m", s.h_m.shape(), batch, cfg.modality_hidden);
    check_state_shape("c_m", s.c_m.shape(), batch, cfg.modality_hidden);
    check_state_shape("h_u", s.h_u.shape(), batch, cfg.union_hidden);
    check_state_shape("c_u", s.c_u.shape(), batch, cfg.union_hidden);
    check_state_shape("feedback_v", s.feedback_v.shape(), batch, cfg.feedback_width);
    check_state_shape("feedback_m", s.feedback_m.shape(), batch, cfg.feedback_width);
  } else {
    const auto& s = std::get<FlatState<Scalar>>(state);
    check_state_shape("h", s.h.shape(), batch, cfg.flat_hidden);
    check_state_shape("c", s.c.shape(), batch, cfg.flat_hidden);
  }
}

template <typename Scalar>
Tensor<Scalar> cat2(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const std::array<Tensor<Scalar>, 2> parts{a, b};
  return k::concat<Scalar>(parts, 1);
}

// keypoints [N, 2C], motion [N, D]
template <typename Scalar>
CoreOut<Scalar> core_step(const Tensor<Scalar>& keypoints, const Tensor<Scalar>& motion,
                          const ModelState<Scalar>& state, const ModelParams<Scalar>& p) {
  if (p.hier) {
    const auto& s = std::get<HierState<Scalar>>(state);
    const auto& h = *p.hier;
    auto v = blocks::lstm_step(cat2(keypoints, s.feedback_v), s.h_v, s.c_v, h.vision);
    auto m = blocks::lstm_step(cat2(motion, s.feedback_m), s.h_m, s.c_m, h.motion);
    auto u = blocks::lstm_step(cat2(v.h, m.h), s.h_u, s.c_u, h.union_rnn);
    auto fb_v = k::tanh(blocks::linear(u.h, h.feedback_vision));
    auto fb_m = k::tanh(blocks::linear(u.h, h.feedback_motion));
    HierState<Scalar> next{v.h, v.c, m.h, m.c, u.h, u.c, std::move(fb_v), std::move(fb_m)};
    return {v.h, m.h, std::move(next)};
  }
  const auto& s = std::get<FlatState<Scalar>>(state);
  auto o = blocks::lstm_step(cat2(keypoints, motion), s.h, s.c, p.flat->lstm);
  return {o.h, o.h, FlatState<Scalar>{o.h, o.c}};
}

template <typename Scalar>
Tensor<Scalar> keypoint_head(const Tensor<Scalar>& hidden, const ModelParams<Scalar>& p) {
  return k::tanh(blocks::linear(hidden, p.keypoint_head));
}

// Non-ST: tanh-bounded motion. ST: raw logits [N, D * bins].
template <typename Scalar>
Tensor<Scalar> motion_head(const Tensor<Scalar>& hidden, const ModelParams<Scalar>& p) {
  Tensor<Scalar> out = blocks::linear(hidden, p.motion_head);
  return p.config.st ? out : k::tanh(out);
}

template <typename Scalar>
Tensor<Scalar> decode_motion(const Tensor<Scalar>& logits, Index rows, const ModelConfig& cfg) {
  const std::vector<double> values = st::decode_rows(logits, *cfg.st);
  k::Array<Scalar> data(static_cast<Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) data[static_cast<Index>(i)] = static_cast<Scalar>(values[i]);
  return Tensor<Scalar>({rows, cfg.motion_dims}, std::move(data));
}

}  // namespace

template <typename Scalar>
StepOutput<Scalar> model_step(const Tensor<Scalar>& image, const Tensor<Scalar>& motion,
                              const ModelState<Scalar>& state, const ModelParams<Scalar>& params,
                              const StepOptions& options) {
  const ModelConfig& cfg = params.config;
  const Index n = image.rank() == 4 ? image.dim(0) : 1;
  const Tensor<Scalar> a = motion.rank() == 1 ? k::reshape(motion, {1, motion.dim(0)}) : motion;
  if (a.shape() != Shape{n, cfg.motion_dims}) {
    throw ShapeError("model_step", "motion " + k::shape_string(motion.shape()) + " does not match batch " +
                                       std::to_string(n) + " and " + std::to_string(cfg.motion_dims) + " dims");
  }
  check_state(state, cfg, n);

  StepOutput<Scalar> out;
  out.keypoints = blocks::encode_image(image, params.encoder).keypoints;
  CoreOut<Scalar> core = core_step(out.keypoints, a, state, params);
  out.keypoints_next = keypoint_head(core.key_hidden, params);
  const Tensor<Scalar> m = motion_head(core.motion_hidden, params);
  if (cfg.st) {
    out.motion_logits = k::reshape(m, {n, cfg.motion_dims, cfg.st->bins});
    out.motion_next = decode_motion(out.motion_logits, n, cfg);
  } else {
    out.motion_next = m;
  }
  if (options.decode_image) out.image_next = blocks::decode_image(out.keypoints_next, params.decoder);
  out.state = std::move(core.state);
  return out;
}

template <typename Scalar>
TeacherBatch<Scalar> make_teacher_batch(std::span<const data::Episode> episodes, const ModelConfig& cfg) {
  cfg.validate();
  if (episodes.empty()) throw ConfigError("model", "no episodes");
  const Index t_len = episodes.front().steps;
  const auto n = static_cast<Index>(episodes.size());
  if (t_len < 2) throw ConfigError("model", "episodes need at least 2 steps, got " + std::to_string(t_len));
  for (const auto& ep : episodes) {
    if (ep.steps != t_len) throw ConfigError("model", "episodes in a batch must share the same length");
    if (ep.dims != cfg.motion_dims) {
      throw ConfigError("model", "episode has " + std::to_string(ep.dims) + " motion dims, model expects " +
                                     std::to_string(cfg.motion_dims));
    }
    if (ep.height != blocks::kImageSide || ep.width != blocks::kImageSide) {
      throw ConfigError("model", "episode frames must be 64x64");
    }
  }
  const Index frame = blocks::kImageSide * blocks::kImageSide;
  const Index d = cfg.motion_dims;
  k::Array<Scalar> images(t_len * n * frame);
  k::Array<Scalar> motions(t_len * n * d);
  for (Index t = 0; t < t_len; ++t) {
    for (Index e = 0; e < n; ++e) {
      const auto& ep = episodes[static_cast<std::size_t>(e)];
      const Index row = t * n + e;
      images.segment(row * frame, frame) = ep.images.segment(t * frame, frame).template cast<Scalar>();
      for (Index j = 0; j < d; ++j) motions[row * d + j] = static_cast<Scalar>(ep.motions_norm(t, j));
    }
  }
  TeacherBatch<Scalar> batch;
  batch.steps = t_len;
  batch.batch = n;
  batch.images = Tensor<Scalar>({t_len * n, 1, blocks::kImageSide, blocks::kImageSide}, std::move(images));
  if (cfg.st) {
    std::vector<double> values;
    values.reserve(static_cast<std::size_t>((t_len - 1) * n * d));
    for (Index row = n; row < t_len * n; ++row) {
      for (Index j = 0; j < d; ++j) values.push_back(static_cast<double>(motions[row * d + j]));
    }
    st::CodecStats stats;
    batch.st_targets = st::encode_targets<Scalar>(values, *cfg.st, &stats);
    batch.clamped = stats.clamped;
  }
  batch.motions = Tensor<Scalar>({t_len * n, d}, std::move(motions));
  return batch;
}

template <typename Scalar>
LossTerms<Scalar> sequence_loss(const TeacherBatch<Scalar>& batch, const ModelParams<Scalar>& params) {
  const ModelConfig& cfg = params.config;
  const Index t_len = batch.steps;
  const Index n = batch.batch;
  if (t_len < 2) throw ConfigError("model", "sequence_loss needs at least 2 steps");
  if (batch.motions.dim(1) != cfg.motion_dims) throw ConfigError("model", "batch motion dims do not match model");
  if (cfg.st && !batch.st_targets.defined()) throw ConfigError("model", "ST variant needs codec targets in the batch");
  const Index rows = (t_len - 1) * n;

  const Tensor<Scalar> keypoints = blocks::encode_image(batch.images, params.encoder).keypoints;
  const Tensor<Scalar> key_target =
      batch.key_targets.defined() ? batch.key_targets : k::slice(keypoints, 0, n, rows).detach();

  ModelState<Scalar> state = zero_state<Scalar>(cfg, n);
  std::vector<Tensor<Scalar>> key_hidden;
  std::vector<Tensor<Scalar>> motion_hidden;
  key_hidden.reserve(static_cast<std::size_t>(t_len - 1));
  motion_hidden.reserve(static_cast<std::size_t>(t_len - 1));
  for (Index t = 0; t + 1 < t_len; ++t) {
    CoreOut<Scalar> core =
        core_step(k::slice(keypoints, 0, t * n, n), k::slice(batch.motions, 0, t * n, n), state, params);
    key_hidden.push_back(std::move(core.key_hidden));
    motion_hidden.push_back(std::move(core.motion_hidden));
    state = std::move(core.state);
  }
  const Tensor<Scalar> key_pred = keypoint_head(k::concat<Scalar>(key_hidden, 0), params);
  const Tensor<Scalar> motion_out = motion_head(k::concat<Scalar>(motion_hidden, 0), params);

  LossTerms<Scalar> terms;
  const Tensor<Scalar> l_k = k::mse_loss(key_pred, key_target);
  Tensor<Scalar> l_a;
  if (cfg.st) {
    l_a = st::st_loss(k::reshape(motion_out, {rows * cfg.motion_dims, cfg.st->bins}), batch.st_targets);
  } else {
    l_a = k::mse_loss(motion_out, k::slice(batch.motions, 0, n, rows));
  }
  terms.k_term = static_cast<double>(l_k.item());
  terms.a_term = static_cast<double>(l_a.item());
  Tensor<Scalar> total = k::add(k::scale(l_k, static_cast<Scalar>(cfg.w_k)), k::scale(l_a, static_cast<Scalar>(cfg.w_a)));
  if (cfg.w_img > 0.0) {
    const Tensor<Scalar> image_pred = blocks::decode_image(key_pred, params.decoder);
    const Tensor<Scalar> l_img = k::mse_loss(image_pred, k::slice(batch.images, 0, n, rows));
    terms.img_term = static_cast<double>(l_img.item());
    total = k::add(total, k::scale(l_img, static_cast<Scalar>(cfg.w_img)));
  }
  terms.total = std::move(total);
  return terms;
}

template <typename Scalar>
Tensor<Scalar> frozen_key_targets(const TeacherBatch<Scalar>& batch, const ModelParams<Scalar>& params) {
  const k::NoGradGuard no_grad;
  const Tensor<Scalar> keypoints = blocks::encode_image(batch.images, params.encoder).keypoints;
  return k::slice(keypoints, 0, batch.batch, (batch.steps - 1) * batch.batch).detach();
}

template <typename Scalar>
LossTerms<Scalar> sequence_loss(const data::Episode& episode, const ModelParams<Scalar>& params) {
  return sequence_loss(make_teacher_batch<Scalar>(std::span<const data::Episode>(&episode, 1), params.config), params);
}

template <typename Scalar>
Eigen::MatrixXd rollout_open_loop(const data::Episode& episode, Index steps, const ModelParams<Scalar>& params) {
  const ModelConfig& cfg = params.config;
  if (steps < 0 || steps > episode.steps - 1) {
    throw ConfigError("model", "rollout of " + std::to_string(steps) + " steps on an episode of " +
                                   std::to_string(episode.steps));
  }
  if (episode.dims != cfg.motion_dims) throw ConfigError("model", "episode motion dims do not match model");
  const k::NoGradGuard no_grad;
  Eigen::MatrixXd out(steps, cfg.motion_dims);
  if (steps == 0) return out;
  ModelState<Scalar> state = zero_state<Scalar>(cfg, 1);
  k::Array<Scalar> a0 = episode.motions_norm.row(0).transpose().template cast<Scalar>().array();
  Tensor<Scalar> motion({1, cfg.motion_dims}, std::move(a0));
  const Index frame = episode.frame_size();
  for (Index t = 0; t < steps; ++t) {
    Tensor<Scalar> image({1, 1, episode.height, episode.width},
                         episode.images.segment(t * frame, frame).template cast<Scalar>());
    StepOutput<Scalar> step = model_step(image, motion, state, params, StepOptions{false});
    for (Index j = 0; j < cfg.motion_dims; ++j) out(t, j) = static_cast<double>(step.motion_next[j]);
    motion = step.motion_next;
    state = std::move(step.state);
  }
  return out;
}

double motion_rmse(const Eigen::MatrixXd& rollout, const data::Episode& episode) {
  const Index steps = rollout.rows();
  if (steps == 0) return 0.0;
  if (steps > episode.steps - 1 || rollout.cols() != episode.dims) {
    throw ConfigError("model", "rollout does not fit the episode");
  }
  const Eigen::MatrixXd teacher = episode.motions_norm.middleRows(1, steps).cast<double>();
  return std::sqrt((rollout - teacher).squaredNorm() / static_cast<double>(rollout.size()));
}

#define HSARNN_INSTANTIATE(S)                                                                                   \
  template struct ModelParams<S>;                                                                              \
  template ModelParams<S> init_params<S>(const ModelConfig&, std::uint64_t);                                   \
  template ModelParams<S> zero_params<S>(const ModelConfig&);                                                  \
  template ModelState<S> zero_state<S>(const ModelConfig&, Index);                                             \
  template ModelState<S> detach_state<S>(const ModelState<S>&);                                                \
  template StepOutput<S> model_step<S>(const Tensor<S>&, const Tensor<S>&, const ModelState<S>&,               \
                                       const ModelParams<S>&, const StepOptions&);                             \
  template TeacherBatch<S> make_teacher_batch<S>(std::span<const data::Episode>, const ModelConfig&);          \
  template LossTerms<S> sequence_loss<S>(const TeacherBatch<S>&, const ModelParams<S>&);                       \
  template Tensor<S> frozen_key_targets<S>(const TeacherBatch<S>&, const ModelParams<S>&);                     \
  template LossTerms<S> sequence_loss<S>(const data::Episode&, const ModelParams<S>&);                         \
  template Eigen::MatrixXd rollout_open_loop<S>(const data::Episode&, Index, const ModelParams<S>&);

HSARNN_INSTANTIATE(float)
HSARNN_INSTANTIATE(double)

#undef HSARNN_INSTANTIATE

}  // namespace hsarnn::model
