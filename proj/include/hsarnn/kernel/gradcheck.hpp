#pragma once

#include "hsarnn/kernel/ops.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace hsarnn::kernel {

/// One link of a random test chain. `features` sets the output width of
/// matmul and the output channel count of conv2d/deconv2d (0 keeps the
/// incoming width); `kernel` is the square kernel side of the convolutions.
struct ChainStep {
  Opcode op = Opcode::tanh;
  OpAttrs attrs;
  Index features = 0;
  Index kernel = 3;
};

enum class ErrorMetric {
  elementwise,  // |a - n| / max(|a|, |n|, 1e-8) per coordinate
  tensor_norm,  // ||a - n|| / max(||a||, ||n||, 1e-8) over a tensor's checked coordinates
};

struct GradCheckOptions {
  double eps = 1e-5;
  /// When > 0, check at most this many coordinates per tensor, chosen with
  /// a seeded shuffle. 0 checks every coordinate.
  Index max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
  /// Skip coordinates whose +-eps evaluations sit on different pieces of a
  /// relu or clamp; the next sampled coordinate is checked instead.
  bool skip_kinks = true;
  ErrorMetric metric = ErrorMetric::elementwise;
};

struct GradCheckStats {
  Index checked = 0;
  Index skipped = 0;  // straddled a kink
};

/// Relative error between analytic and central-difference gradients under
/// `options.metric`, maximized over the tensors in `params`. `loss_fn` must
/// rebuild the graph from the current values of `params` on every call.
double grad_check(const std::function<Tensor<double>()>& loss_fn, std::vector<Tensor<double>> params,
                  const GradCheckOptions& options = {}, GradCheckStats* stats = nullptr);

/// Builds a scalar loss from a random input of `input_shape` pushed through
/// `chain`, with random operands for binary ops and random targets for loss
/// ops. A chain that does not end in a loss is closed with a randomly
/// weighted sum. Returns the max relative error over the input and all
/// random operands.
double grad_check(const std::vector<ChainStep>& chain, const Shape& input_shape, std::uint64_t seed,
                  GradCheckStats* stats = nullptr);

}  // namespace hsarnn::kernel
