#pragma once

#include "hsarnn/kernel/tensor.hpp"

#include <span>

namespace hsarnn::kernel {

/// Generic entry point: validates operand shapes for `op`, computes the
/// output, and records a graph node when any operand requires a gradient.
/// Throws ShapeError naming the opcode and offending dimensions.
template <typename Scalar>
Tensor<Scalar> apply(Opcode op, std::span<const Tensor<Scalar>> inputs, const OpAttrs& attrs = {});

// Typed wrappers around apply().

/// a[..., k] x b[k, n] -> [..., n]; or batched a[B..., m, k] x b[B..., k, n].
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

/// x [N,C,H,W] or [C,H,W]; kernel [Co,C,kh,kw]; optional bias [Co].
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& kernel, const Tensor<Scalar>& bias,
                      Index stride, Index padding);

/// Transposed convolution. kernel [C,Co,kh,kw]; output side
/// (in - 1) * stride - 2 * padding + k + output_padding.
template <typename Scalar>
Tensor<Scalar> deconv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& kernel, const Tensor<Scalar>& bias,
                        Index stride, Index padding, Index output_padding);

/// Elementwise with trailing broadcast: b's shape must equal a suffix of a's
/// shape, or b holds a single element. Operands are commutative, so the
/// larger may come second.
template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar>
Tensor<Scalar> tanh(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> softmax_lastdim(const Tensor<Scalar>& x);

/// Mean squared error over all elements; scalar result.
template <typename Scalar>
Tensor<Scalar> mse_loss(const Tensor<Scalar>& prediction, const Tensor<Scalar>& target);

/// Mean over rows (all but the last axis) of -sum(target * log_softmax(logits)).
template <typename Scalar>
Tensor<Scalar> cross_entropy_loss(const Tensor<Scalar>& logits, const Tensor<Scalar>& target);

template <typename Scalar>
Tensor<Scalar> concat(std::span<const Tensor<Scalar>> parts, Index axis);
template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& x, Index axis, Index start, Index length);
template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape);
template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x);
/// Gradient passes where lo <= x <= hi and is zero elsewhere.
template <typename Scalar>
Tensor<Scalar> clamp(const Tensor<Scalar>& x, double lo, double hi);

/// a * constant, without tracking the constant.
template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar factor) {
  return mul(x, Tensor<Scalar>::scalar(factor));
}

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable tensor that requires one; the graph behind `loss` is released
/// afterwards (leaf gradients are kept).
template <typename Scalar>
void backprop(const Tensor<Scalar>& loss);

}  // namespace hsarnn::kernel
