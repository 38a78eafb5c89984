#pragma once

#include "hsarnn/kernel/ops.hpp"

#include <functional>
#include <random>
#include <string>
#include <utility>

namespace hsarnn::blocks {

using kernel::Index;
using kernel::Tensor;

inline constexpr Index kImageSide = 64;
inline constexpr Index kFeatureSide = 16;
inline constexpr double kHeatmapSigmaPx = 1.5;

template <typename Scalar>
using ParamVisitor = std::function<void(const std::string& name, Tensor<Scalar>& param)>;

/// Xavier-uniform initializer driven by one seeded engine. Draw order is
/// the order of the init calls, which keeps initialization reproducible.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  template <typename Scalar>
  Tensor<Scalar> xavier(kernel::Shape shape, Index fan_in, Index fan_out);

  template <typename Scalar>
  Tensor<Scalar> constant(kernel::Shape shape, Scalar value);

  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

template <typename Scalar>
struct LinearParams {
  Tensor<Scalar> weight;  // [in, out]
  Tensor<Scalar> bias;    // [out]

  static LinearParams init(Index in, Index out, Initializer& init);
  void visit(const std::string& prefix, const ParamVisitor<Scalar>& fn);
};

/// x [..., in] -> [..., out]
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const LinearParams<Scalar>& p);

template <typename Scalar>
struct ConvLayer {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;
  Index stride = 1;
  Index padding = 1;
  Index output_padding = 0;  // transposed layers only
};

/// Three 3x3 convolutions, 1 -> 8 -> 16 -> C channels, taking a 1x64x64
/// image to a Cx16x16 feature map (strides 2, 2, 1).
template <typename Scalar>
struct ConvEncoderParams {
  ConvLayer<Scalar> conv1, conv2, conv3;

  static ConvEncoderParams init(Index channels, Initializer& init);
  void visit(const std::string& prefix, const ParamVisitor<Scalar>& fn);
};

/// Mirror of the encoder built from transposed convolutions: Cx16x16
/// heatmaps -> 16 -> 8 -> 1x64x64.
template <typename Scalar>
struct ConvDecoderParams {
  ConvLayer<Scalar> deconv1, deconv2, deconv3;

  static ConvDecoderParams init(Index channels, Initializer& init);
  void visit(const std::string& prefix, const ParamVisitor<Scalar>& fn);
};

/// Gate layout along the 4H axis is [input, forget, cell, output].
template <typename Scalar>
struct LstmCellParams {
  Tensor<Scalar> w_input;   // [in, 4H]
  Tensor<Scalar> w_hidden;  // [H, 4H]
  Tensor<Scalar> bias;      // [4H]
  Index input_size = 0;
  Index hidden_size = 0;

  /// Xavier weights; forget-gate bias 1, other biases 0.
  static LstmCellParams init(Index input_size, Index hidden_size, Initializer& init);
  void visit(const std::string& prefix, const ParamVisitor<Scalar>& fn);
};

/// Per-channel softmax over the HxW cells followed by the expected grid
/// coordinate. features [C,H,W] -> [2C], or [N,C,H,W] -> [N,2C], laid out
/// [x0, y0, x1, y1, ...] with x along columns and y along rows, both
/// spanning [-1, 1].
template <typename Scalar>
Tensor<Scalar> spatial_softmax(const Tensor<Scalar>& features, double temperature = 1.0);

template <typename Scalar>
struct LstmOutput {
  Tensor<Scalar> h;
  Tensor<Scalar> c;
};

/// x [N, in], h and c [N, H].
template <typename Scalar>
LstmOutput<Scalar> lstm_step(const Tensor<Scalar>& x, const Tensor<Scalar>& h, const Tensor<Scalar>& c,
                             const LstmCellParams<Scalar>& p);

template <typename Scalar>
struct EncodedImage {
  Tensor<Scalar> features;   // [N, C, 16, 16]
  Tensor<Scalar> keypoints;  // [N, 2C]
};

/// image [1,64,64] or [N,1,64,64], values in [0,1].
template <typename Scalar>
EncodedImage<Scalar> encode_image(const Tensor<Scalar>& image, const ConvEncoderParams<Scalar>& p);

/// Separable Gaussian blobs (sigma 1.5 px on the 16x16 grid, peak ~1) for
/// each keypoint. keypoints [N, 2C] -> [N, C, 16, 16]. Keypoints outside
/// [-1, 1] are clamped.
template <typename Scalar>
Tensor<Scalar> keypoint_heatmaps(const Tensor<Scalar>& keypoints, Index side = kFeatureSide);

/// keypoints [N, 2C] -> sigmoid image [N, 1, 64, 64].
template <typename Scalar>
Tensor<Scalar> decode_image(const Tensor<Scalar>& keypoints, const ConvDecoderParams<Scalar>& p);

}  // namespace hsarnn::blocks
