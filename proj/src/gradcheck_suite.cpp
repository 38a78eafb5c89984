#include "hsarnn/gradcheck_suite.hpp"

#include "hsarnn/blocks.hpp"
#include "hsarnn/model.hpp"
#include "hsarnn/stacksim.hpp"
#include "hsarnn/stcodec.hpp"

#include <algorithm>
#include <chrono>
#include <functional>
#include <random>

namespace hsarnn::gradcheck {

namespace {

using kernel::ChainStep;
using kernel::Opcode;
using kernel::OpAttrs;
using kernel::Shape;
using T = kernel::Tensor<double>;

struct OpCase {
  std::vector<ChainStep> chain;
  Shape input;
};

ChainStep step(Opcode op, OpAttrs attrs = {}, Index features = 0, Index kernel = 3) {
  return ChainStep{op, std::move(attrs), features, kernel};
}

OpAttrs conv_attrs(Index stride, Index padding, Index output_padding = 0) {
  OpAttrs a;
  a.stride = stride;
  a.padding = padding;
  a.output_padding = output_padding;
  return a;
}

OpAttrs axis_attrs(Index axis, Index start = 0, Index length = 0) {
  OpAttrs a;
  a.axis = axis;
  a.start = start;
  a.length = length;
  return a;
}

OpAttrs reshape_attrs(Shape shape) {
  OpAttrs a;
  a.shape = std::move(shape);
  return a;
}

OpAttrs clamp_attrs(double lo, double hi) {
  OpAttrs a;
  a.lo = lo;
  a.hi = hi;
  return a;
}

/// Two cases per opcode, each a short chain built around it.
std::vector<std::pair<Opcode, std::vector<OpCase>>> opcode_cases() {
  const ChainStep th = step(Opcode::tanh);
  return {
      {Opcode::matmul,
       {{{step(Opcode::matmul, {}, 5), th}, {3, 4}}, {{step(Opcode::matmul, {}, 3)}, {2, 3, 4}}}},
      {Opcode::conv2d,
       {{{step(Opcode::conv2d, conv_attrs(1, 1), 3), th, step(Opcode::mse_loss)}, {2, 5, 5}},
        {{step(Opcode::conv2d, conv_attrs(2, 1), 2)}, {2, 3, 7, 7}}}},
      {Opcode::deconv2d,
       {{{step(Opcode::deconv2d, conv_attrs(1, 1), 3), th, step(Opcode::mse_loss)}, {2, 4, 4}},
        {{step(Opcode::deconv2d, conv_attrs(2, 1, 1), 2)}, {2, 3, 4, 4}}}},
      {Opcode::add, {{{step(Opcode::add), th}, {3, 4}}, {{step(Opcode::add)}, {2, 3, 5}}}},
      {Opcode::mul, {{{step(Opcode::mul), th}, {3, 4}}, {{step(Opcode::mul)}, {2, 3, 5}}}},
      {Opcode::tanh, {{{th}, {3, 4}}, {{th, step(Opcode::mse_loss)}, {2, 3, 5}}}},
      {Opcode::sigmoid, {{{step(Opcode::sigmoid)}, {3, 4}}, {{step(Opcode::sigmoid), step(Opcode::mse_loss)}, {2, 3, 5}}}},
      {Opcode::relu, {{{step(Opcode::relu)}, {3, 4}}, {{step(Opcode::relu), th}, {2, 3, 5}}}},
      {Opcode::softmax_lastdim,
       {{{step(Opcode::softmax_lastdim)}, {3, 4}}, {{step(Opcode::softmax_lastdim), step(Opcode::mse_loss)}, {2, 3, 6}}}},
      {Opcode::mse_loss, {{{step(Opcode::mse_loss)}, {3, 4}}, {{th, step(Opcode::mse_loss)}, {2, 3, 5}}}},
      {Opcode::cross_entropy_loss,
       {{{step(Opcode::cross_entropy_loss)}, {3, 5}}, {{th, step(Opcode::cross_entropy_loss)}, {2, 3, 7}}}},
      {Opcode::concat,
       {{{step(Opcode::concat, axis_attrs(-1)), th}, {3, 4}}, {{step(Opcode::concat, axis_attrs(0))}, {2, 3, 5}}}},
      {Opcode::slice,
       {{{step(Opcode::slice, axis_attrs(1, 1, 3)), th}, {4, 6}}, {{step(Opcode::slice, axis_attrs(0, 1, 2))}, {3, 5, 4}}}},
      {Opcode::reshape,
       {{{step(Opcode::reshape, reshape_attrs({2, 6})), th}, {3, 4}},
        {{step(Opcode::reshape, reshape_attrs({6, 4}))}, {2, 3, 4}}}},
      {Opcode::sum, {{{step(Opcode::sum)}, {3, 4}}, {{th, step(Opcode::sum)}, {2, 3, 5}}}},
      {Opcode::clamp,
       {{{step(Opcode::clamp, clamp_attrs(-0.5, 0.5))}, {3, 4}},
        {{step(Opcode::clamp, clamp_attrs(-0.3, 0.6)), th}, {2, 3, 5}}}},
  };
}

T random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  kernel::Array<double> values(kernel::numel(shape));
  for (auto& v : values) v = u(rng);
  return T(std::move(shape), std::move(values));
}

/// Weighted sum with fixed random weights: a scalar that depends on every
/// element of `x`.
T probe(const T& x, const T& weights) { return kernel::sum(kernel::mul(x, weights)); }

/// Moves every value by a small uniform amount so that no relu sits
/// exactly at its kink (zero biases over blank image regions would).
void perturb(std::vector<T>& leaves, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  for (auto& t : leaves) {
    for (auto& v : t.mutable_data()) v += u(rng);
  }
}

template <typename Params>
std::vector<T> leaves_of(Params& p, std::uint64_t seed) {
  std::vector<T> out;
  p.visit("", [&](const std::string&, T& t) { out.push_back(t); });
  perturb(out, seed);
  return out;
}

SuiteEntry make_entry(std::string name, const std::function<T()>& loss, std::vector<T> leaves,
                      const kernel::GradCheckOptions& options) {
  kernel::GradCheckStats stats;
  SuiteEntry e;
  e.name = std::move(name);
  e.max_error = kernel::grad_check(loss, std::move(leaves), options, &stats);
  e.cases = 1;
  e.checked = stats.checked;
  e.skipped = stats.skipped;
  e.metric = options.metric == kernel::ErrorMetric::tensor_norm ? "tensor_norm" : "elementwise";
  return e;
}

SuiteEntry block_encoder(const SuiteOptions& o, std::uint64_t seed) {
  blocks::Initializer init(seed);
  auto params = blocks::ConvEncoderParams<double>::init(4, init);
  std::mt19937_64 rng(seed + 1);
  T image = random_tensor({1, 1, 64, 64}, rng, 0.0, 1.0);
  T wf = random_tensor({1, 4, 16, 16}, rng);
  T wk = random_tensor({1, 8}, rng);
  auto loss = [&]() {
    auto enc = blocks::encode_image(image, params);
    return kernel::add(probe(enc.features, wf), probe(enc.keypoints, wk));
  };
  auto leaves = leaves_of(params, seed + 2);
  leaves.push_back(image);
  return make_entry("block:conv_encoder", loss, leaves, {o.eps, o.block_coords, seed});
}

SuiteEntry block_spatial_softmax(const SuiteOptions& o, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  T features = random_tensor({2, 3, 6, 6}, rng, -2.0, 2.0);
  T w = random_tensor({2, 6}, rng);
  auto loss = [&]() { return probe(blocks::spatial_softmax(features, 0.7), w); };
  return make_entry("block:spatial_softmax", loss, {features}, {o.eps, 0, seed});
}

SuiteEntry block_lstm(const SuiteOptions& o, std::uint64_t seed) {
  blocks::Initializer init(seed);
  auto params = blocks::LstmCellParams<double>::init(5, 4, init);
  std::mt19937_64 rng(seed + 1);
  T x = random_tensor({2, 5}, rng);
  T h = random_tensor({2, 4}, rng);
  T c = random_tensor({2, 4}, rng);
  T wh = random_tensor({2, 4}, rng);
  T wc = random_tensor({2, 4}, rng);
  auto loss = [&]() {
    auto out = blocks::lstm_step(x, h, c, params);
    return kernel::add(probe(out.h, wh), probe(out.c, wc));
  };
  auto leaves = leaves_of(params, seed + 2);
  leaves.insert(leaves.end(), {x, h, c});
  return make_entry("block:lstm_step", loss, leaves, {o.eps, 0, seed});
}

SuiteEntry block_decoder(const SuiteOptions& o, std::uint64_t seed) {
  blocks::Initializer init(seed);
  auto params = blocks::ConvDecoderParams<double>::init(4, init);
  std::mt19937_64 rng(seed + 1);
  T keypoints = random_tensor({1, 8}, rng, -0.8, 0.8);
  T target = random_tensor({1, 1, 64, 64}, rng, 0.0, 1.0);
  auto loss = [&]() { return kernel::mse_loss(blocks::decode_image(keypoints, params), target); };
  auto leaves = leaves_of(params, seed + 2);
  leaves.push_back(keypoints);
  return make_entry("block:decoder", loss, leaves, {o.eps, o.block_coords, seed});
}

SuiteEntry block_st_loss(const SuiteOptions& o, std::uint64_t seed) {
  st::StCodecConfig cfg;
  cfg.bins = 64;
  cfg.sigma_bins = 3.0;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const std::vector<double> values{u(rng), u(rng), u(rng)};
  T targets = st::encode_targets<double>(values, cfg);
  T logits = random_tensor({3, 64}, rng, -3.0, 3.0);
  auto loss = [&]() { return st::st_loss(logits, targets); };
  return make_entry("block:st_loss", loss, {logits}, {o.eps, 0, seed});
}

/// T frames of a teacher demonstration at position C, spaced to cover the
/// whole task so that every motion dimension varies.
data::Episode short_episode(Index steps) {
  const Index full = 200;
  const auto run = sim::run_teacher(sim::make_task("C"), full, 10.0, 0);
  const auto& src = run.episode;
  data::Episode ep;
  ep.steps = steps;
  ep.dims = src.dims;
  ep.height = src.height;
  ep.width = src.width;
  ep.images.resize(steps * src.frame_size());
  ep.motions_raw.resize(steps, src.dims);
  for (Index t = 0; t < steps; ++t) {
    const Index s = t * (full - 1) / std::max<Index>(steps - 1, 1);
    ep.images.segment(t * src.frame_size(), src.frame_size()) = src.images.segment(s * src.frame_size(), src.frame_size());
    ep.motions_raw.row(t) = src.motions_raw.row(s);
  }
  ep.meta = src.meta;
  return data::with_bounds(ep, src.bounds);
}

SuiteEntry sequence_check(model::Variant v, const data::Episode& ep, const SuiteOptions& o, std::uint64_t seed) {
  auto params = model::init_params<double>(model::ModelConfig::defaults(v), seed);
  auto batch = model::make_teacher_batch<double>(std::span<const data::Episode>(&ep, 1), params.config);
  std::vector<T> leaves;
  for (auto& [name, t] : params.named()) leaves.push_back(t);
  perturb(leaves, seed + 2);
  // Stop-gradient targets stay at their unperturbed values.
  batch.key_targets = model::frozen_key_targets(batch, params);
  auto loss = [&]() { return model::sequence_loss(batch, params).total; };
  return make_entry("block:sequence_loss_" + std::string(model::variant_name(v)), loss, leaves,
                    {o.sequence_eps, o.sequence_coords, seed, true, kernel::ErrorMetric::tensor_norm});
}

}  // namespace

SuiteResult run_suite(const SuiteOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  SuiteResult result;
  for (const auto& [op, cases] : opcode_cases()) {
    SuiteEntry entry;
    entry.name = kernel::opcode_name(op);
    for (Index s = 0; s < options.seeds; ++s) {
      for (std::size_t c = 0; c < cases.size(); ++c) {
        const std::uint64_t seed = options.seed + static_cast<std::uint64_t>(s) * 131 + c;
        kernel::GradCheckStats stats;
        entry.max_error = std::max(entry.max_error, kernel::grad_check(cases[c].chain, cases[c].input, seed, &stats));
        entry.checked += stats.checked;
        entry.skipped += stats.skipped;
        ++entry.cases;
      }
    }
    result.entries.push_back(entry);
  }
  result.entries.push_back(block_encoder(options, options.seed + 11));
  result.entries.push_back(block_spatial_softmax(options, options.seed + 12));
  result.entries.push_back(block_lstm(options, options.seed + 13));
  result.entries.push_back(block_decoder(options, options.seed + 14));
  result.entries.push_back(block_st_loss(options, options.seed + 15));
  const auto ep = short_episode(options.sequence_steps);
  result.entries.push_back(sequence_check(model::Variant::HSARNNST, ep, options, options.seed + 16));
  result.entries.push_back(sequence_check(model::Variant::SARNN, ep, options, options.seed + 17));

  result.passed = true;
  for (auto& e : result.entries) {
    e.passed = e.max_error < options.tolerance;
    result.passed = result.passed && e.passed;
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace hsarnn::gradcheck
