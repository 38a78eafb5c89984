#include "hsarnn/blocks.hpp"

#include "hsarnn/error.hpp"

#include <cmath>
#include <numbers>

namespace hsarnn::blocks {

using kernel::Array;
using kernel::Shape;

template <typename Scalar>
Tensor<Scalar> Initializer::xavier(Shape shape, Index fan_in, Index fan_out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  Array<Scalar> values(kernel::numel(shape));
  for (auto& v : values) v = static_cast<Scalar>(u(rng_));
  return Tensor<Scalar>(std::move(shape), std::move(values), true);
}

template <typename Scalar>
Tensor<Scalar> Initializer::constant(Shape shape, Scalar value) {
  return Tensor<Scalar>::full(std::move(shape), value, true);
}

template <typename Scalar>
LinearParams<Scalar> LinearParams<Scalar>::init(Index in, Index out, Initializer& init) {
  return {init.xavier<Scalar>({in, out}, in, out), init.constant<Scalar>({out}, Scalar(0))};
}

template <typename Scalar>
void LinearParams<Scalar>::visit(const std::string& prefix, const ParamVisitor<Scalar>& fn) {
  fn(prefix + ".weight", weight);
  fn(prefix + ".bias", bias);
}

template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const LinearParams<Scalar>& p) {
  return kernel::add(kernel::matmul(x, p.weight), p.bias);
}

namespace {

template <typename Scalar>
ConvLayer<Scalar> conv_layer(Index in_c, Index out_c, Index stride, Initializer& init) {
  return {init.xavier<Scalar>({out_c, in_c, 3, 3}, in_c * 9, out_c * 9), init.constant<Scalar>({out_c}, Scalar(0)),
          stride, 1, 0};
}

template <typename Scalar>
ConvLayer<Scalar> deconv_layer(Index in_c, Index out_c, Index stride, Initializer& init) {
  return {init.xavier<Scalar>({in_c, out_c, 3, 3}, out_c * 9, in_c * 9), init.constant<Scalar>({out_c}, Scalar(0)),
          stride, 1, stride - 1};
}

template <typename Scalar>
void visit_layer(const std::string& prefix, ConvLayer<Scalar>& layer, const ParamVisitor<Scalar>& fn) {
  fn(prefix + ".weight", layer.weight);
  fn(prefix + ".bias", layer.bias);
}

template <typename Scalar>
Tensor<Scalar> run_conv(const Tensor<Scalar>& x, const ConvLayer<Scalar>& l) {
  return kernel::conv2d(x, l.weight, l.bias, l.stride, l.padding);
}

template <typename Scalar>
Tensor<Scalar> run_deconv(const Tensor<Scalar>& x, const ConvLayer<Scalar>& l) {
  return kernel::deconv2d(x, l.weight, l.bias, l.stride, l.padding, l.output_padding);
}

}  // namespace

template <typename Scalar>
ConvEncoderParams<Scalar> ConvEncoderParams<Scalar>::init(Index channels, Initializer& init) {
  ConvEncoderParams p;
  p.conv1 = conv_layer<Scalar>(1, 8, 2, init);
  p.conv2 = conv_layer<Scalar>(8, 16, 2, init);
  p.conv3 = conv_layer<Scalar>(16, channels, 1, init);
  return p;
}

template <typename Scalar>
void ConvEncoderParams<Scalar>::visit(const std::string& prefix, const ParamVisitor<Scalar>& fn) {
  visit_layer(prefix + ".conv1", conv1, fn);
  visit_layer(prefix + ".conv2", conv2, fn);
  visit_layer(prefix + ".conv3", conv3, fn);
}

template <typename Scalar>
ConvDecoderParams<Scalar> ConvDecoderParams<Scalar>::init(Index channels, Initializer& init) {
  ConvDecoderParams p;
  p.deconv1 = deconv_layer<Scalar>(channels, 16, 1, init);
  p.deconv2 = deconv_layer<Scalar>(16, 8, 2, init);
  p.deconv3 = deconv_layer<Scalar>(8, 1, 2, init);
  return p;
}

template <typename Scalar>
void ConvDecoderParams<Scalar>::visit(const std::string& prefix, const ParamVisitor<Scalar>& fn) {
  visit_layer(prefix + ".deconv1", deconv1, fn);
  visit_layer(prefix + ".deconv2", deconv2, fn);
  visit_layer(prefix + ".deconv3", deconv3, fn);
}

template <typename Scalar>
LstmCellParams<Scalar> LstmCellParams<Scalar>::init(Index input_size, Index hidden_size, Initializer& init) {
  LstmCellParams p;
  p.input_size = input_size;
  p.hidden_size = hidden_size;
  p.w_input = init.xavier<Scalar>({input_size, 4 * hidden_size}, input_size, 4 * hidden_size);
  p.w_hidden = init.xavier<Scalar>({hidden_size, 4 * hidden_size}, hidden_size, 4 * hidden_size);
  Array<Scalar> b = Array<Scalar>::Zero(4 * hidden_size);
  b.segment(hidden_size, hidden_size).setConstant(Scalar(1));
  p.bias = Tensor<Scalar>({4 * hidden_size}, std::move(b), true);
  return p;
}

template <typename Scalar>
void LstmCellParams<Scalar>::visit(const std::string& prefix, const ParamVisitor<Scalar>& fn) {
  fn(prefix + ".w_input", w_input);
  fn(prefix + ".w_hidden", w_hidden);
  fn(prefix + ".bias", bias);
}

template <typename Scalar>
Tensor<Scalar> spatial_softmax(const Tensor<Scalar>& features, double temperature) {
  if (!(temperature > 0.0)) throw Error("blocks", "spatial_softmax: temperature must be positive");
  const Shape& s = features.shape();
  if (s.size() != 3 && s.size() != 4) {
    throw ShapeError("spatial_softmax", "features must be [C,H,W] or [N,C,H,W], got " + kernel::shape_string(s));
  }
  const bool batched = s.size() == 4;
  const Index n = batched ? s[0] : 1;
  const Index c = s[s.size() - 3];
  const Index h = s[s.size() - 2];
  const Index w = s[s.size() - 1];
  if (h < 2 || w < 2) throw ShapeError("spatial_softmax", "grid must be at least 2x2, got " + kernel::shape_string(s));

  Array<Scalar> grid(h * w * 2);
  for (Index r = 0; r < h; ++r) {
    for (Index col = 0; col < w; ++col) {
      grid[(r * w + col) * 2] = static_cast<Scalar>(-1.0 + 2.0 * static_cast<double>(col) / static_cast<double>(w - 1));
      grid[(r * w + col) * 2 + 1] = static_cast<Scalar>(-1.0 + 2.0 * static_cast<double>(r) / static_cast<double>(h - 1));
    }
  }
  Tensor<Scalar> logits = kernel::reshape(features, {n, c, h * w});
  if (temperature != 1.0) logits = kernel::scale(logits, static_cast<Scalar>(1.0 / temperature));
  Tensor<Scalar> weights = kernel::softmax_lastdim(logits);
  Tensor<Scalar> coords = kernel::matmul(weights, Tensor<Scalar>({h * w, 2}, std::move(grid)));
  coords = kernel::clamp(coords, -1.0, 1.0);
  return kernel::reshape(coords, batched ? Shape{n, 2 * c} : Shape{2 * c});
}

template <typename Scalar>
LstmOutput<Scalar> lstm_step(const Tensor<Scalar>& x, const Tensor<Scalar>& h, const Tensor<Scalar>& c,
                             const LstmCellParams<Scalar>& p) {
  const Index hs = p.hidden_size;
  if (x.rank() != 2 || x.dim(1) != p.input_size) {
    throw ShapeError("lstm_step", "input " + kernel::shape_string(x.shape()) + " does not match input size " +
                                      std::to_string(p.input_size));
  }
  const Shape state{x.dim(0), hs};
  if (h.shape() != state || c.shape() != state) {
    throw ShapeError("lstm_step", "state " + kernel::shape_string(h.shape()) + "/" + kernel::shape_string(c.shape()) +
                                      " expected " + kernel::shape_string(state));
  }
  const Tensor<Scalar> gates =
      kernel::add(kernel::add(kernel::matmul(x, p.w_input), kernel::matmul(h, p.w_hidden)), p.bias);
  const auto i = kernel::sigmoid(kernel::slice(gates, 1, 0, hs));
  const auto f = kernel::sigmoid(kernel::slice(gates, 1, hs, hs));
  const auto g = kernel::tanh(kernel::slice(gates, 1, 2 * hs, hs));
  const auto o = kernel::sigmoid(kernel::slice(gates, 1, 3 * hs, hs));
  Tensor<Scalar> c_next = kernel::add(kernel::mul(f, c), kernel::mul(i, g));
  Tensor<Scalar> h_next = kernel::mul(o, kernel::tanh(c_next));
  return {std::move(h_next), std::move(c_next)};
}

template <typename Scalar>
EncodedImage<Scalar> encode_image(const Tensor<Scalar>& image, const ConvEncoderParams<Scalar>& p) {
  const Shape& s = image.shape();
  const bool ok = (s.size() == 3 || s.size() == 4) && s[s.size() - 3] == 1 && s[s.size() - 2] == kImageSide &&
                  s[s.size() - 1] == kImageSide;
  if (!ok) throw ShapeError("encode_image", "expected [1,64,64] or [N,1,64,64], got " + kernel::shape_string(s));
  const Tensor<Scalar> x = s.size() == 4 ? image : kernel::reshape(image, {1, 1, kImageSide, kImageSide});
  Tensor<Scalar> f = kernel::relu(run_conv(x, p.conv1));
  f = kernel::relu(run_conv(f, p.conv2));
  f = run_conv(f, p.conv3);
  Tensor<Scalar> kp = spatial_softmax(f);
  return {std::move(f), std::move(kp)};
}

template <typename Scalar>
Tensor<Scalar> keypoint_heatmaps(const Tensor<Scalar>& keypoints, Index side) {
  const Shape& s = keypoints.shape();
  if ((s.size() != 1 && s.size() != 2) || s.back() % 2 != 0) {
    throw ShapeError("keypoint_heatmaps", "expected [2C] or [N,2C], got " + kernel::shape_string(s));
  }
  const Index n = s.size() == 2 ? s[0] : 1;
  const Index c = s.back() / 2;
  const double step = 2.0 / static_cast<double>(side - 1);
  const double sigma = kHeatmapSigmaPx * step;
  // softmax_j(-(g_j - k)^2 / 2s^2) == softmax_j(g_j k / s^2 - g_j^2 / 2s^2)
  Array<Scalar> slope(side);
  Array<Scalar> offset(side);
  for (Index j = 0; j < side; ++j) {
    const double g = -1.0 + step * static_cast<double>(j);
    slope[j] = static_cast<Scalar>(g / (sigma * sigma));
    offset[j] = static_cast<Scalar>(-g * g / (2.0 * sigma * sigma));
  }
  const Tensor<Scalar> slope_t({1, side}, std::move(slope));
  const Tensor<Scalar> offset_t({side}, std::move(offset));
  const auto peak = static_cast<Scalar>(std::sqrt(2.0 * std::numbers::pi) * kHeatmapSigmaPx);

  const Tensor<Scalar> kp = kernel::reshape(kernel::clamp(keypoints, -1.0, 1.0), {n * c, 2});
  auto blob = [&](Index coord) {
    const Tensor<Scalar> k = kernel::slice(kp, 1, coord, 1);
    return kernel::scale(kernel::softmax_lastdim(kernel::add(kernel::matmul(k, slope_t), offset_t)), peak);
  };
  const Tensor<Scalar> gx = blob(0);
  const Tensor<Scalar> gy = blob(1);
  const Tensor<Scalar> heat =
      kernel::matmul(kernel::reshape(gy, {n * c, side, 1}), kernel::reshape(gx, {n * c, 1, side}));
  return kernel::reshape(heat, {n, c, side, side});
}

template <typename Scalar>
Tensor<Scalar> decode_image(const Tensor<Scalar>& keypoints, const ConvDecoderParams<Scalar>& p) {
  const bool batched = keypoints.rank() == 2;
  Tensor<Scalar> x = keypoint_heatmaps(keypoints);
  x = kernel::relu(run_deconv(x, p.deconv1));
  x = kernel::relu(run_deconv(x, p.deconv2));
  x = kernel::sigmoid(run_deconv(x, p.deconv3));
  if (!batched) x = kernel::reshape(x, {1, kImageSide, kImageSide});
  return x;
}

#define HSARNN_INSTANTIATE(S)                                                                                   \
  template Tensor<S> Initializer::xavier<S>(Shape, Index, Index);                                              \
  template Tensor<S> Initializer::constant<S>(Shape, S);                                                       \
  template struct LinearParams<S>;                                                                             \
  template struct ConvEncoderParams<S>;                                                                        \
  template struct ConvDecoderParams<S>;                                                                        \
  template struct LstmCellParams<S>;                                                                           \
  template Tensor<S> linear<S>(const Tensor<S>&, const LinearParams<S>&);                                      \
  template Tensor<S> spatial_softmax<S>(const Tensor<S>&, double);                                             \
  template LstmOutput<S> lstm_step<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,                    \
                                      const LstmCellParams<S>&);                                               \
  template EncodedImage<S> encode_image<S>(const Tensor<S>&, const ConvEncoderParams<S>&);                     \
  template Tensor<S> keypoint_heatmaps<S>(const Tensor<S>&, Index);                                            \
  template Tensor<S> decode_image<S>(const Tensor<S>&, const ConvDecoderParams<S>&);

HSARNN_INSTANTIATE(float)
HSARNN_INSTANTIATE(double)

#undef HSARNN_INSTANTIATE

}  // namespace hsarnn::blocks
