#include "hsarnn/kernel/ops.hpp"

#include "hsarnn/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_set>

namespace hsarnn::kernel {

namespace {

template <typename S>
using NodeT = detail::Node<S>;
template <typename S>
using NodePtr = std::shared_ptr<NodeT<S>>;
template <typename S>
using MatMap = Eigen::Map<RowMatrix<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const RowMatrix<S>>;

[[noreturn]] void fail(Opcode op, const std::string& detail) {
  throw ShapeError(std::string(opcode_name(op)), detail);
}

void expect_arity(Opcode op, std::size_t got, std::size_t lo, std::size_t hi) {
  if (got < lo || got > hi) {
    fail(op, "expected " + std::to_string(lo) + (lo == hi ? "" : "-" + std::to_string(hi)) +
                 " operands, got " + std::to_string(got));
  }
}

Index normalize_axis(Opcode op, Index axis, Index rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) fail(op, "axis out of range for rank " + std::to_string(rank));
  return axis;
}

Index prod(const Shape& s, std::size_t from, std::size_t to) {
  Index n = 1;
  for (std::size_t i = from; i < to; ++i) n *= s[i];
  return n;
}

template <typename S>
Array<S>& grad_buffer(NodeT<S>& node) {
  if (node.grad.size() == 0) node.grad = Array<S>::Zero(node.value.size());
  return node.grad;
}

template <typename S>
Tensor<S> make_result(Opcode op, Shape shape, Array<S> value, std::vector<NodePtr<S>> inputs,
                      const OpAttrs& attrs, std::vector<Array<S>> saved = {}) {
  auto node = std::make_shared<NodeT<S>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->id = detail::next_node_id();
  const bool track = grad_enabled() && std::any_of(inputs.begin(), inputs.end(),
                                 [](const NodePtr<S>& n) { return n->requires_grad; });
  if (track) {
    node->requires_grad = true;
    node->op = op;
    node->attrs = attrs;
    node->inputs = std::move(inputs);
    node->saved = std::move(saved);
  }
  return Tensor<S>(std::move(node));
}

// Folds which side of [lo, hi] each element falls on into the kink probe.
template <typename S>
void record_kinks(const Array<S>& x, S lo, S hi) {
  if (!detail::kink_probe_active()) return;
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (Index i = 0; i < x.size(); ++i) {
    const std::uint64_t side = x[i] <= lo ? 1 : (x[i] > hi ? 2 : 0);
    h = (h ^ side) * 0x100000001b3ULL;
  }
  detail::fold_kinks(h);
}

// ---------------------------------------------------------------------------
// Convolution geometry shared by conv2d and deconv2d.

struct ConvGeometry {
  Index channels = 0;  // channels of the spatial image side
  Index height = 0, width = 0;
  Index kh = 0, kw = 0;
  Index stride = 1, padding = 0;
  Index grid_h = 0, grid_w = 0;  // output grid of the correlation

  Index rows() const { return channels * kh * kw; }
  Index cols() const { return grid_h * grid_w; }
};

// Output columns oj whose input column oj * stride - padding + kj lies
// inside [0, width).
struct ColumnRange {
  Index lo = 0, hi = 0;  // [lo, hi)
};

inline ColumnRange valid_columns(const ConvGeometry& g, Index kj) {
  const Index off = kj - g.padding;
  Index lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  Index hi = g.width - 1 - off < 0 ? 0 : (g.width - 1 - off) / g.stride + 1;
  lo = std::min(lo, g.grid_w);
  hi = std::clamp(hi, lo, g.grid_w);
  return {lo, hi};
}

// image [C,H,W] -> cols [C*kh*kw, grid_h*grid_w], rows `ld` apart
template <typename S>
void im2col(const S* image, const ConvGeometry& g, S* cols, Index ld) {
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        S* row = cols + ((c * g.kh + ki) * g.kw + kj) * ld;
        const ColumnRange r = valid_columns(g, kj);
        const Index off = kj - g.padding;
        for (Index oi = 0; oi < g.grid_h; ++oi) {
          const Index ii = oi * g.stride - g.padding + ki;
          S* out = row + oi * g.grid_w;
          if (ii < 0 || ii >= g.height) {
            std::fill(out, out + g.grid_w, S(0));
            continue;
          }
          const S* src = image + (c * g.height + ii) * g.width + off;
          std::fill(out, out + r.lo, S(0));
          if (g.stride == 1) {
            std::copy(src + r.lo, src + r.hi, out + r.lo);
          } else {
            for (Index oj = r.lo; oj < r.hi; ++oj) out[oj] = src[oj * g.stride];
          }
          std::fill(out + r.hi, out + g.grid_w, S(0));
        }
      }
    }
  }
}

// adjoint of im2col: scatter-add cols back into image
template <typename S>
void col2im(const S* cols, const ConvGeometry& g, S* image, Index ld) {
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        const S* row = cols + ((c * g.kh + ki) * g.kw + kj) * ld;
        const ColumnRange r = valid_columns(g, kj);
        const Index off = kj - g.padding;
        for (Index oi = 0; oi < g.grid_h; ++oi) {
          const Index ii = oi * g.stride - g.padding + ki;
          if (ii < 0 || ii >= g.height) continue;
          S* dst = image + (c * g.height + ii) * g.width + off;
          const S* in = row + oi * g.grid_w;
          if (g.stride == 1) {
            for (Index oj = r.lo; oj < r.hi; ++oj) dst[oj] += in[oj];
          } else {
            for (Index oj = r.lo; oj < r.hi; ++oj) dst[oj * g.stride] += in[oj];
          }
        }
      }
    }
  }
}

struct ConvDims {
  Index batch = 1;
  bool batched = false;
  Index in_c = 0, in_h = 0, in_w = 0;
  Index out_c = 0, out_h = 0, out_w = 0;
  Index kh = 0, kw = 0;
};

template <typename S>
ConvDims conv_dims(Opcode op, const NodeT<S>& x, const NodeT<S>& w, const NodeT<S>* b, const OpAttrs& attrs) {
  ConvDims d;
  const Shape& xs = x.shape;
  if (xs.size() != 3 && xs.size() != 4) fail(op, "input must be [C,H,W] or [N,C,H,W], got " + shape_string(xs));
  if (w.shape.size() != 4) fail(op, "kernel must be rank 4, got " + shape_string(w.shape));
  if (attrs.stride < 1) fail(op, "stride must be >= 1, got " + std::to_string(attrs.stride));
  if (attrs.padding < 0) fail(op, "padding must be >= 0, got " + std::to_string(attrs.padding));
  d.batched = xs.size() == 4;
  const std::size_t o = d.batched ? 1 : 0;
  d.batch = d.batched ? xs[0] : 1;
  d.in_c = xs[o];
  d.in_h = xs[o + 1];
  d.in_w = xs[o + 2];
  d.kh = w.shape[2];
  d.kw = w.shape[3];
  if (op == Opcode::conv2d) {
    if (w.shape[1] != d.in_c) {
      fail(op, "input channels " + std::to_string(d.in_c) + " != kernel in-channels " +
                   std::to_string(w.shape[1]));
    }
    d.out_c = w.shape[0];
    const Index eh = d.in_h + 2 * attrs.padding - d.kh;
    const Index ew = d.in_w + 2 * attrs.padding - d.kw;
    if (eh < 0 || ew < 0) fail(op, "kernel larger than padded input " + shape_string(xs));
    d.out_h = eh / attrs.stride + 1;
    d.out_w = ew / attrs.stride + 1;
  } else {
    if (w.shape[0] != d.in_c) {
      fail(op, "input channels " + std::to_string(d.in_c) + " != kernel in-channels " +
                   std::to_string(w.shape[0]));
    }
    if (attrs.output_padding < 0 || attrs.output_padding >= attrs.stride) {
      fail(op, "output_padding must be in [0, stride), got " + std::to_string(attrs.output_padding));
    }
    d.out_c = w.shape[1];
    d.out_h = (d.in_h - 1) * attrs.stride - 2 * attrs.padding + d.kh + attrs.output_padding;
    d.out_w = (d.in_w - 1) * attrs.stride - 2 * attrs.padding + d.kw + attrs.output_padding;
    if (d.out_h < 1 || d.out_w < 1) fail(op, "non-positive output size for input " + shape_string(xs));
  }
  if (b && b->value.size() != d.out_c) {
    fail(op, "bias has " + std::to_string(b->value.size()) + " elements, expected " + std::to_string(d.out_c));
  }
  return d;
}

Shape conv_out_shape(const ConvDims& d) {
  if (d.batched) return {d.batch, d.out_c, d.out_h, d.out_w};
  return {d.out_c, d.out_h, d.out_w};
}

ConvGeometry conv_geometry(const ConvDims& d, const OpAttrs& attrs) {
  // conv2d correlates over its input; deconv2d is the adjoint, so the
  // correlation runs over its output.
  ConvGeometry g;
  g.kh = d.kh;
  g.kw = d.kw;
  g.stride = attrs.stride;
  g.padding = attrs.padding;
  return g;
}

// Images are processed in groups so each GEMM sees kConvGroup images side
// by side.
constexpr Index kConvGroup = 16;

template <typename S>
Tensor<S> conv2d_forward(const std::vector<NodePtr<S>>& in, const OpAttrs& attrs) {
  const NodeT<S>& x = *in[0];
  const NodeT<S>& w = *in[1];
  const NodeT<S>* b = in.size() > 2 ? in[2].get() : nullptr;
  const ConvDims d = conv_dims(Opcode::conv2d, x, w, b, attrs);
  ConvGeometry g = conv_geometry(d, attrs);
  g.channels = d.in_c;
  g.height = d.in_h;
  g.width = d.in_w;
  g.grid_h = d.out_h;
  g.grid_w = d.out_w;

  const Index in_size = d.in_c * d.in_h * d.in_w;
  const Index out_size = d.out_c * d.out_h * d.out_w;
  const Index group = std::min(d.batch, kConvGroup);
  const Index ld = group * g.cols();
  Array<S> out(d.batch * out_size);
  RowMatrix<S> cols(g.rows(), ld);
  RowMatrix<S> res(d.out_c, ld);
  ConstMatMap<S> wm(w.value.data(), d.out_c, g.rows());
  for (Index n0 = 0; n0 < d.batch; n0 += group) {
    const Index gn = std::min(group, d.batch - n0);
    for (Index i = 0; i < gn; ++i) im2col(x.value.data() + (n0 + i) * in_size, g, cols.data() + i * g.cols(), ld);
    res.leftCols(gn * g.cols()).noalias() = wm * cols.leftCols(gn * g.cols());
    for (Index i = 0; i < gn; ++i) {
      MatMap<S> o(out.data() + (n0 + i) * out_size, d.out_c, g.cols());
      o = res.middleCols(i * g.cols(), g.cols());
      if (b) o.colwise() += Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(b->value.data(), d.out_c);
    }
  }
  return make_result<S>(Opcode::conv2d, conv_out_shape(d), std::move(out), in, attrs);
}

template <typename S>
void conv2d_backward(NodeT<S>& node) {
  NodeT<S>& x = *node.inputs[0];
  NodeT<S>& w = *node.inputs[1];
  NodeT<S>* b = node.inputs.size() > 2 ? node.inputs[2].get() : nullptr;
  const ConvDims d = conv_dims(Opcode::conv2d, x, w, b, node.attrs);
  ConvGeometry g = conv_geometry(d, node.attrs);
  g.channels = d.in_c;
  g.height = d.in_h;
  g.width = d.in_w;
  g.grid_h = d.out_h;
  g.grid_w = d.out_w;

  const Index in_size = d.in_c * d.in_h * d.in_w;
  const Index out_size = d.out_c * d.out_h * d.out_w;
  const Index group = std::min(d.batch, kConvGroup);
  const Index ld = group * g.cols();
  RowMatrix<S> cols(g.rows(), ld);
  RowMatrix<S> dcols(g.rows(), ld);
  RowMatrix<S> go(d.out_c, ld);
  ConstMatMap<S> wm(w.value.data(), d.out_c, g.rows());
  RowMatrix<S> dw = RowMatrix<S>::Zero(d.out_c, g.rows());
  for (Index n0 = 0; n0 < d.batch; n0 += group) {
    const Index gn = std::min(group, d.batch - n0);
    const Index nc = gn * g.cols();
    for (Index i = 0; i < gn; ++i) {
      go.middleCols(i * g.cols(), g.cols()) = ConstMatMap<S>(node.grad.data() + (n0 + i) * out_size, d.out_c, g.cols());
    }
    if (w.requires_grad) {
      for (Index i = 0; i < gn; ++i) {
        im2col(x.value.data() + (n0 + i) * in_size, g, cols.data() + i * g.cols(), ld);
      }
      dw.noalias() += go.leftCols(nc) * cols.leftCols(nc).transpose();
    }
    if (x.requires_grad) {
      dcols.leftCols(nc).noalias() = wm.transpose() * go.leftCols(nc);
      for (Index i = 0; i < gn; ++i) {
        col2im(dcols.data() + i * g.cols(), g, grad_buffer(x).data() + (n0 + i) * in_size, ld);
      }
    }
    if (b && b->requires_grad) {
      Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(grad_buffer(*b).data(), d.out_c) +=
          go.leftCols(nc).rowwise().sum();
    }
  }
  if (w.requires_grad) {
    MatMap<S>(grad_buffer(w).data(), d.out_c, g.rows()) += dw;
  }
}

template <typename S>
Tensor<S> deconv2d_forward(const std::vector<NodePtr<S>>& in, const OpAttrs& attrs) {
  const NodeT<S>& x = *in[0];
  const NodeT<S>& w = *in[1];
  const NodeT<S>* b = in.size() > 2 ? in[2].get() : nullptr;
  const ConvDims d = conv_dims(Opcode::deconv2d, x, w, b, attrs);
  ConvGeometry g = conv_geometry(d, attrs);
  g.channels = d.out_c;
  g.height = d.out_h;
  g.width = d.out_w;
  g.grid_h = d.in_h;
  g.grid_w = d.in_w;

  const Index in_size = d.in_c * d.in_h * d.in_w;
  const Index out_size = d.out_c * d.out_h * d.out_w;
  const Index group = std::min(d.batch, kConvGroup);
  const Index ld = group * g.cols();
  Array<S> out = Array<S>::Zero(d.batch * out_size);
  RowMatrix<S> xs(d.in_c, ld);
  RowMatrix<S> cols(g.rows(), ld);
  ConstMatMap<S> wm(w.value.data(), d.in_c, g.rows());
  for (Index n0 = 0; n0 < d.batch; n0 += group) {
    const Index gn = std::min(group, d.batch - n0);
    const Index nc = gn * g.cols();
    for (Index i = 0; i < gn; ++i) {
      xs.middleCols(i * g.cols(), g.cols()) = ConstMatMap<S>(x.value.data() + (n0 + i) * in_size, d.in_c, g.cols());
    }
    cols.leftCols(nc).noalias() = wm.transpose() * xs.leftCols(nc);
    for (Index i = 0; i < gn; ++i) {
      S* o = out.data() + (n0 + i) * out_size;
      col2im(cols.data() + i * g.cols(), g, o, ld);
      if (b) {
        MatMap<S>(o, d.out_c, d.out_h * d.out_w).colwise() +=
            Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(b->value.data(), d.out_c);
      }
    }
  }
  return make_result<S>(Opcode::deconv2d, conv_out_shape(d), std::move(out), in, attrs);
}

template <typename S>
void deconv2d_backward(NodeT<S>& node) {
  NodeT<S>& x = *node.inputs[0];
  NodeT<S>& w = *node.inputs[1];
  NodeT<S>* b = node.inputs.size() > 2 ? node.inputs[2].get() : nullptr;
  const ConvDims d = conv_dims(Opcode::deconv2d, x, w, b, node.attrs);
  ConvGeometry g = conv_geometry(d, node.attrs);
  g.channels = d.out_c;
  g.height = d.out_h;
  g.width = d.out_w;
  g.grid_h = d.in_h;
  g.grid_w = d.in_w;

  const Index in_size = d.in_c * d.in_h * d.in_w;
  const Index out_size = d.out_c * d.out_h * d.out_w;
  const Index group = std::min(d.batch, kConvGroup);
  const Index ld = group * g.cols();
  RowMatrix<S> dcols(g.rows(), ld);
  RowMatrix<S> xs(d.in_c, ld);
  RowMatrix<S> dx(d.in_c, ld);
  ConstMatMap<S> wm(w.value.data(), d.in_c, g.rows());
  RowMatrix<S> dw = RowMatrix<S>::Zero(d.in_c, g.rows());
  for (Index n0 = 0; n0 < d.batch; n0 += group) {
    const Index gn = std::min(group, d.batch - n0);
    const Index nc = gn * g.cols();
    for (Index i = 0; i < gn; ++i) im2col(node.grad.data() + (n0 + i) * out_size, g, dcols.data() + i * g.cols(), ld);
    if (x.requires_grad) {
      dx.leftCols(nc).noalias() = wm * dcols.leftCols(nc);
      for (Index i = 0; i < gn; ++i) {
        MatMap<S>(grad_buffer(x).data() + (n0 + i) * in_size, d.in_c, g.cols()) += dx.middleCols(i * g.cols(), g.cols());
      }
    }
    if (w.requires_grad) {
      for (Index i = 0; i < gn; ++i) {
        xs.middleCols(i * g.cols(), g.cols()) = ConstMatMap<S>(x.value.data() + (n0 + i) * in_size, d.in_c, g.cols());
      }
      dw.noalias() += xs.leftCols(nc) * dcols.leftCols(nc).transpose();
    }
    if (b && b->requires_grad) {
      auto gb = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(grad_buffer(*b).data(), d.out_c);
      for (Index i = 0; i < gn; ++i) {
        gb += ConstMatMap<S>(node.grad.data() + (n0 + i) * out_size, d.out_c, d.out_h * d.out_w).rowwise().sum();
      }
    }
  }
  if (w.requires_grad) {
    MatMap<S>(grad_buffer(w).data(), d.in_c, g.rows()) += dw;
  }
}

// ---------------------------------------------------------------------------
// matmul

struct MatmulDims {
  bool batched = false;
  Index batches = 1;
  Index m = 0, k = 0, n = 0;
  Shape out;
};

template <typename S>
MatmulDims matmul_dims(const NodeT<S>& a, const NodeT<S>& b) {
  const Shape& as = a.shape;
  const Shape& bs = b.shape;
  MatmulDims d;
  if (as.empty()) fail(Opcode::matmul, "left operand must have rank >= 1");
  if (bs.size() == 2) {
    d.k = as.back();
    if (bs[0] != d.k) {
      fail(Opcode::matmul, "inner dimensions differ: " + shape_string(as) + " x " + shape_string(bs));
    }
    d.m = a.value.size() / d.k;
    d.n = bs[1];
    d.out.assign(as.begin(), as.end() - 1);
    d.out.push_back(d.n);
    return d;
  }
  if (as.size() >= 3 && bs.size() == as.size() &&
      std::equal(as.begin(), as.end() - 2, bs.begin())) {
    d.batched = true;
    d.m = as[as.size() - 2];
    d.k = as.back();
    if (bs[bs.size() - 2] != d.k) {
      fail(Opcode::matmul, "inner dimensions differ: " + shape_string(as) + " x " + shape_string(bs));
    }
    d.n = bs.back();
    d.batches = prod(as, 0, as.size() - 2);
    d.out.assign(as.begin(), as.end() - 1);
    d.out.push_back(d.n);
    return d;
  }
  fail(Opcode::matmul, "unsupported operand shapes " + shape_string(as) + " x " + shape_string(bs));
}

template <typename S>
Tensor<S> matmul_forward(const std::vector<NodePtr<S>>& in) {
  const NodeT<S>& a = *in[0];
  const NodeT<S>& b = *in[1];
  const MatmulDims d = matmul_dims(a, b);
  Array<S> out(d.batches * d.m * d.n);
  for (Index i = 0; i < d.batches; ++i) {
    ConstMatMap<S> am(a.value.data() + i * d.m * d.k, d.m, d.k);
    ConstMatMap<S> bm(b.value.data() + (d.batched ? i * d.k * d.n : 0), d.k, d.n);
    MatMap<S>(out.data() + i * d.m * d.n, d.m, d.n).noalias() = am * bm;
  }
  return make_result<S>(Opcode::matmul, d.out, std::move(out), in, {});
}

template <typename S>
void matmul_backward(NodeT<S>& node) {
  NodeT<S>& a = *node.inputs[0];
  NodeT<S>& b = *node.inputs[1];
  const MatmulDims d = matmul_dims(a, b);
  for (Index i = 0; i < d.batches; ++i) {
    ConstMatMap<S> g(node.grad.data() + i * d.m * d.n, d.m, d.n);
    const Index b_off = d.batched ? i * d.k * d.n : 0;
    if (a.requires_grad) {
      ConstMatMap<S> bm(b.value.data() + b_off, d.k, d.n);
      MatMap<S>(grad_buffer(a).data() + i * d.m * d.k, d.m, d.k).noalias() += g * bm.transpose();
    }
    if (b.requires_grad) {
      ConstMatMap<S> am(a.value.data() + i * d.m * d.k, d.m, d.k);
      MatMap<S>(grad_buffer(b).data() + b_off, d.k, d.n).noalias() += am.transpose() * g;
    }
  }
}

// ---------------------------------------------------------------------------
// broadcasting elementwise

bool suffix_broadcastable(const Shape& big, const Shape& small) {
  if (numel(small) == 1) return true;
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

template <typename S>
std::vector<NodePtr<S>> order_broadcast(Opcode op, const std::vector<NodePtr<S>>& in) {
  const Shape& as = in[0]->shape;
  const Shape& bs = in[1]->shape;
  if (in[0]->value.size() >= in[1]->value.size() && suffix_broadcastable(as, bs)) return in;
  if (suffix_broadcastable(bs, as)) return {in[1], in[0]};
  fail(op, "cannot broadcast " + shape_string(bs) + " against " + shape_string(as));
}

template <typename S>
Tensor<S> binary_forward(Opcode op, const std::vector<NodePtr<S>>& raw) {
  const auto in = order_broadcast(op, raw);
  const NodeT<S>& big = *in[0];
  const NodeT<S>& small = *in[1];
  const Index inner = small.value.size();
  const Index outer = big.value.size() / inner;
  Array<S> out(big.value.size());
  ConstMatMap<S> bm(big.value.data(), outer, inner);
  MatMap<S> om(out.data(), outer, inner);
  const auto row = Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(small.value.data(), inner);
  if (op == Opcode::add) {
    om = bm.rowwise() + row;
  } else {
    om = bm.array().rowwise() * row.array();
  }
  return make_result<S>(op, big.shape, std::move(out), in, {});
}

template <typename S>
void binary_backward(NodeT<S>& node) {
  NodeT<S>& big = *node.inputs[0];
  NodeT<S>& small = *node.inputs[1];
  const Index inner = small.value.size();
  const Index outer = big.value.size() / inner;
  ConstMatMap<S> g(node.grad.data(), outer, inner);
  const auto row = Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(small.value.data(), inner);
  if (node.op == Opcode::add) {
    if (big.requires_grad) grad_buffer(big) += node.grad;
    if (small.requires_grad) {
      Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(grad_buffer(small).data(), inner) += g.colwise().sum();
    }
  } else {
    if (big.requires_grad) {
      MatMap<S>(grad_buffer(big).data(), outer, inner).array() += g.array().rowwise() * row.array();
    }
    if (small.requires_grad) {
      ConstMatMap<S> bm(big.value.data(), outer, inner);
      Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(grad_buffer(small).data(), inner) +=
          (g.array() * bm.array()).matrix().colwise().sum();
    }
  }
}

// ---------------------------------------------------------------------------
// row-wise helpers over the last axis

template <typename S>
Index last_dim(Opcode op, const Shape& s) {
  if (s.empty()) fail(op, "operand must have rank >= 1");
  return s.back();
}

template <typename S>
void softmax_rows(const S* in, Index rows, Index width, S* out) {
  for (Index r = 0; r < rows; ++r) {
    const S* x = in + r * width;
    S* y = out + r * width;
    const S mx = *std::max_element(x, x + width);
    S total = 0;
    for (Index j = 0; j < width; ++j) {
      y[j] = std::exp(x[j] - mx);
      total += y[j];
    }
    for (Index j = 0; j < width; ++j) y[j] /= total;
  }
}

// ---------------------------------------------------------------------------
// concat / slice

template <typename S>
Tensor<S> concat_forward(const std::vector<NodePtr<S>>& in, const OpAttrs& attrs) {
  const Opcode op = Opcode::concat;
  if (in.empty()) fail(op, "needs at least one operand");
  const Shape& first = in[0]->shape;
  const Index rank = static_cast<Index>(first.size());
  if (rank == 0) fail(op, "operands must have rank >= 1");
  const auto axis = static_cast<std::size_t>(normalize_axis(op, attrs.axis, rank));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : in) {
    if (p->shape.size() != first.size()) fail(op, "rank mismatch: " + shape_string(p->shape) + " vs " + shape_string(first));
    for (std::size_t i = 0; i < first.size(); ++i) {
      if (i != axis && p->shape[i] != first[i]) {
        fail(op, "dimension " + std::to_string(i) + " differs: " + shape_string(p->shape) + " vs " + shape_string(first));
      }
    }
    out_shape[axis] += p->shape[axis];
  }
  const Index outer = prod(first, 0, axis);
  const Index out_inner = prod(out_shape, axis, out_shape.size());
  Array<S> out(outer * out_inner);
  Index offset = 0;
  for (const auto& p : in) {
    const Index inner = prod(p->shape, axis, p->shape.size());
    for (Index o = 0; o < outer; ++o) {
      std::copy_n(p->value.data() + o * inner, inner, out.data() + o * out_inner + offset);
    }
    offset += inner;
  }
  OpAttrs saved_attrs = attrs;
  saved_attrs.axis = static_cast<Index>(axis);
  return make_result<S>(op, std::move(out_shape), std::move(out), in, saved_attrs);
}

template <typename S>
void concat_backward(NodeT<S>& node) {
  const auto axis = static_cast<std::size_t>(node.attrs.axis);
  const Index outer = prod(node.shape, 0, axis);
  const Index out_inner = prod(node.shape, axis, node.shape.size());
  Index offset = 0;
  for (auto& p : node.inputs) {
    const Index inner = prod(p->shape, axis, p->shape.size());
    if (p->requires_grad) {
      auto& g = grad_buffer(*p);
      for (Index o = 0; o < outer; ++o) {
        g.segment(o * inner, inner) += node.grad.segment(o * out_inner + offset, inner);
      }
    }
    offset += inner;
  }
}

struct SliceDims {
  Index outer = 1, in_inner = 1, chunk = 1;
};

SliceDims slice_dims(const Shape& s, std::size_t axis) {
  return {prod(s, 0, axis), prod(s, axis, s.size()), prod(s, axis + 1, s.size())};
}

template <typename S>
Tensor<S> slice_forward(const std::vector<NodePtr<S>>& in, const OpAttrs& attrs) {
  const Opcode op = Opcode::slice;
  const Shape& s = in[0]->shape;
  const Index rank = static_cast<Index>(s.size());
  if (rank == 0) fail(op, "operand must have rank >= 1");
  const auto axis = static_cast<std::size_t>(normalize_axis(op, attrs.axis, rank));
  if (attrs.start < 0 || attrs.length < 1 || attrs.start + attrs.length > s[axis]) {
    fail(op, "range [" + std::to_string(attrs.start) + ", " + std::to_string(attrs.start + attrs.length) +
                 ") invalid for axis " + std::to_string(axis) + " of " + shape_string(s));
  }
  const SliceDims d = slice_dims(s, axis);
  Shape out_shape = s;
  out_shape[axis] = attrs.length;
  const Index len = attrs.length * d.chunk;
  Array<S> out(d.outer * len);
  for (Index o = 0; o < d.outer; ++o) {
    std::copy_n(in[0]->value.data() + o * d.in_inner + attrs.start * d.chunk, len, out.data() + o * len);
  }
  OpAttrs saved_attrs = attrs;
  saved_attrs.axis = static_cast<Index>(axis);
  return make_result<S>(op, std::move(out_shape), std::move(out), in, saved_attrs);
}

template <typename S>
void slice_backward(NodeT<S>& node) {
  NodeT<S>& x = *node.inputs[0];
  if (!x.requires_grad) return;
  const SliceDims d = slice_dims(x.shape, static_cast<std::size_t>(node.attrs.axis));
  const Index len = node.attrs.length * d.chunk;
  auto& g = grad_buffer(x);
  for (Index o = 0; o < d.outer; ++o) {
    g.segment(o * d.in_inner + node.attrs.start * d.chunk, len) += node.grad.segment(o * len, len);
  }
}

// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> forward(Opcode op, const std::vector<NodePtr<S>>& in, const OpAttrs& attrs) {
  switch (op) {
    case Opcode::matmul:
      expect_arity(op, in.size(), 2, 2);
      return matmul_forward(in);
    case Opcode::conv2d:
      expect_arity(op, in.size(), 2, 3);
      return conv2d_forward(in, attrs);
    case Opcode::deconv2d:
      expect_arity(op, in.size(), 2, 3);
      return deconv2d_forward(in, attrs);
    case Opcode::add:
    case Opcode::mul:
      expect_arity(op, in.size(), 2, 2);
      return binary_forward(op, in);
    case Opcode::tanh: {
      expect_arity(op, in.size(), 1, 1);
      Array<S> out = in[0]->value.tanh();
      return make_result<S>(op, in[0]->shape, std::move(out), in, attrs);
    }
    case Opcode::sigmoid: {
      expect_arity(op, in.size(), 1, 1);
      Array<S> out = (S(1) + (-in[0]->value).exp()).inverse();
      return make_result<S>(op, in[0]->shape, std::move(out), in, attrs);
    }
    case Opcode::relu: {
      expect_arity(op, in.size(), 1, 1);
      record_kinks(in[0]->value, S(0), std::numeric_limits<S>::infinity());
      Array<S> out = in[0]->value.max(S(0));
      return make_result<S>(op, in[0]->shape, std::move(out), in, attrs);
    }
    case Opcode::softmax_lastdim: {
      expect_arity(op, in.size(), 1, 1);
      const Index width = last_dim<S>(op, in[0]->shape);
      Array<S> out(in[0]->value.size());
      softmax_rows(in[0]->value.data(), in[0]->value.size() / width, width, out.data());
      return make_result<S>(op, in[0]->shape, std::move(out), in, attrs);
    }
    case Opcode::mse_loss: {
      expect_arity(op, in.size(), 2, 2);
      if (in[0]->shape != in[1]->shape) {
        fail(op, "prediction " + shape_string(in[0]->shape) + " vs target " + shape_string(in[1]->shape));
      }
      const S value = (in[0]->value - in[1]->value).square().mean();
      return make_result<S>(op, Shape{}, Array<S>::Constant(1, value), in, attrs);
    }
    case Opcode::cross_entropy_loss: {
      expect_arity(op, in.size(), 2, 2);
      if (in[0]->shape != in[1]->shape) {
        fail(op, "logits " + shape_string(in[0]->shape) + " vs target " + shape_string(in[1]->shape));
      }
      const Index width = last_dim<S>(op, in[0]->shape);
      const Index rows = in[0]->value.size() / width;
      Array<S> probs(in[0]->value.size());
      Array<S> log_probs(in[0]->value.size());
      for (Index r = 0; r < rows; ++r) {
        const auto z = in[0]->value.segment(r * width, width);
        const S mx = z.maxCoeff();
        const S lse = mx + std::log((z - mx).exp().sum());
        log_probs.segment(r * width, width) = z - lse;
      }
      probs = log_probs.exp();
      const S value = -(in[1]->value * log_probs).sum() / static_cast<S>(rows);
      return make_result<S>(op, Shape{}, Array<S>::Constant(1, value), in, attrs,
                            {std::move(probs), std::move(log_probs)});
    }
    case Opcode::concat:
      return concat_forward(in, attrs);
    case Opcode::slice:
      expect_arity(op, in.size(), 1, 1);
      return slice_forward(in, attrs);
    case Opcode::reshape: {
      expect_arity(op, in.size(), 1, 1);
      for (Index dim : attrs.shape) {
        if (dim <= 0) fail(op, "non-positive target dimension in " + shape_string(attrs.shape));
      }
      if (numel(attrs.shape) != in[0]->value.size()) {
        fail(op, "cannot view " + shape_string(in[0]->shape) + " as " + shape_string(attrs.shape));
      }
      return make_result<S>(op, attrs.shape, in[0]->value, in, attrs);
    }
    case Opcode::sum: {
      expect_arity(op, in.size(), 1, 1);
      return make_result<S>(op, Shape{}, Array<S>::Constant(1, in[0]->value.sum()), in, attrs);
    }
    case Opcode::clamp: {
      expect_arity(op, in.size(), 1, 1);
      if (!(attrs.lo <= attrs.hi)) fail(op, "lo must not exceed hi");
      record_kinks(in[0]->value, static_cast<S>(attrs.lo), static_cast<S>(attrs.hi));
      Array<S> out = in[0]->value.max(static_cast<S>(attrs.lo)).min(static_cast<S>(attrs.hi));
      return make_result<S>(op, in[0]->shape, std::move(out), in, attrs);
    }
    case Opcode::leaf:
      break;
  }
  throw Error("kernel", "unknown opcode " + std::to_string(static_cast<int>(op)));
}

template <typename S>
void backward(NodeT<S>& node) {
  auto& in = node.inputs;
  const Array<S>& g = node.grad;
  switch (node.op) {
    case Opcode::matmul:
      matmul_backward(node);
      return;
    case Opcode::conv2d:
      conv2d_backward(node);
      return;
    case Opcode::deconv2d:
      deconv2d_backward(node);
      return;
    case Opcode::add:
    case Opcode::mul:
      binary_backward(node);
      return;
    case Opcode::tanh:
      if (in[0]->requires_grad) grad_buffer(*in[0]) += g * (S(1) - node.value.square());
      return;
    case Opcode::sigmoid:
      if (in[0]->requires_grad) grad_buffer(*in[0]) += g * node.value * (S(1) - node.value);
      return;
    case Opcode::relu:
      if (in[0]->requires_grad) grad_buffer(*in[0]) += (in[0]->value > S(0)).select(g, S(0));
      return;
    case Opcode::softmax_lastdim: {
      if (!in[0]->requires_grad) return;
      const Index width = node.shape.back();
      const Index rows = node.value.size() / width;
      auto& dx = grad_buffer(*in[0]);
      for (Index r = 0; r < rows; ++r) {
        const auto y = node.value.segment(r * width, width);
        const auto gy = g.segment(r * width, width);
        const S dot = (gy * y).sum();
        dx.segment(r * width, width) += y * (gy - dot);
      }
      return;
    }
    case Opcode::mse_loss: {
      const S factor = S(2) * g[0] / static_cast<S>(in[0]->value.size());
      if (in[0]->requires_grad) grad_buffer(*in[0]) += factor * (in[0]->value - in[1]->value);
      if (in[1]->requires_grad) grad_buffer(*in[1]) -= factor * (in[0]->value - in[1]->value);
      return;
    }
    case Opcode::cross_entropy_loss: {
      const Index width = in[0]->shape.back();
      const Index rows = in[0]->value.size() / width;
      const S factor = g[0] / static_cast<S>(rows);
      const Array<S>& probs = node.saved[0];
      const Array<S>& log_probs = node.saved[1];
      const Array<S>& target = in[1]->value;
      if (in[0]->requires_grad) {
        auto& dz = grad_buffer(*in[0]);
        for (Index r = 0; r < rows; ++r) {
          const S mass = target.segment(r * width, width).sum();
          dz.segment(r * width, width) +=
              factor * (mass * probs.segment(r * width, width) - target.segment(r * width, width));
        }
      }
      if (in[1]->requires_grad) grad_buffer(*in[1]) -= factor * log_probs;
      return;
    }
    case Opcode::concat:
      concat_backward(node);
      return;
    case Opcode::slice:
      slice_backward(node);
      return;
    case Opcode::reshape:
      if (in[0]->requires_grad) grad_buffer(*in[0]) += g;
      return;
    case Opcode::sum:
      if (in[0]->requires_grad) grad_buffer(*in[0]) += g[0];
      return;
    case Opcode::clamp: {
      if (!in[0]->requires_grad) return;
      const auto& x = in[0]->value;
      const S lo = static_cast<S>(node.attrs.lo);
      const S hi = static_cast<S>(node.attrs.hi);
      grad_buffer(*in[0]) += (x >= lo && x <= hi).select(g, S(0));
      return;
    }
    case Opcode::leaf:
      return;
  }
}

template <typename S>
Tensor<S> apply_nodes(Opcode op, std::vector<NodePtr<S>> nodes, const OpAttrs& attrs) {
  return forward(op, nodes, attrs);
}

template <typename S>
std::vector<NodePtr<S>> nodes_of(std::span<const Tensor<S>> inputs) {
  std::vector<NodePtr<S>> nodes;
  nodes.reserve(inputs.size());
  for (const auto& t : inputs) {
    if (!t.defined()) throw Error("kernel", "undefined operand");
    nodes.push_back(t.node());
  }
  return nodes;
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> apply(Opcode op, std::span<const Tensor<Scalar>> inputs, const OpAttrs& attrs) {
  return apply_nodes(op, nodes_of(inputs), attrs);
}

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const Tensor<Scalar> in[] = {a, b};
  return apply<Scalar>(Opcode::matmul, in);
}

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& kernel, const Tensor<Scalar>& bias,
                      Index stride, Index padding) {
  OpAttrs attrs;
  attrs.stride = stride;
  attrs.padding = padding;
  if (bias.defined()) {
    const Tensor<Scalar> in[] = {x, kernel, bias};
    return apply<Scalar>(Opcode::conv2d, in, attrs);
  }
  const Tensor<Scalar> in[] = {x, kernel};
  return apply<Scalar>(Opcode::conv2d, in, attrs);
}

template <typename Scalar>
Tensor<Scalar> deconv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& kernel, const Tensor<Scalar>& bias,
                        Index stride, Index padding, Index output_padding) {
  OpAttrs attrs;
  attrs.stride = stride;
  attrs.padding = padding;
  attrs.output_padding = output_padding;
  if (bias.defined()) {
    const Tensor<Scalar> in[] = {x, kernel, bias};
    return apply<Scalar>(Opcode::deconv2d, in, attrs);
  }
  const Tensor<Scalar> in[] = {x, kernel};
  return apply<Scalar>(Opcode::deconv2d, in, attrs);
}

#define HSARNN_BINARY(name, code)                                              \
  template <typename Scalar>                                                   \
  Tensor<Scalar> name(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {      \
    const Tensor<Scalar> in[] = {a, b};                                        \
    return apply<Scalar>(Opcode::code, in);                                    \
  }
#define HSARNN_UNARY(name, code)                                               \
  template <typename Scalar>                                                   \
  Tensor<Scalar> name(const Tensor<Scalar>& x) {                               \
    const Tensor<Scalar> in[] = {x};                                           \
    return apply<Scalar>(Opcode::code, in);                                    \
  }

HSARNN_BINARY(add, add)
HSARNN_BINARY(mul, mul)
HSARNN_BINARY(mse_loss, mse_loss)
HSARNN_BINARY(cross_entropy_loss, cross_entropy_loss)
HSARNN_UNARY(tanh, tanh)
HSARNN_UNARY(sigmoid, sigmoid)
HSARNN_UNARY(relu, relu)
HSARNN_UNARY(softmax_lastdim, softmax_lastdim)
HSARNN_UNARY(sum, sum)

#undef HSARNN_BINARY
#undef HSARNN_UNARY

template <typename Scalar>
Tensor<Scalar> concat(std::span<const Tensor<Scalar>> parts, Index axis) {
  OpAttrs attrs;
  attrs.axis = axis;
  return apply<Scalar>(Opcode::concat, parts, attrs);
}

template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& x, Index axis, Index start, Index length) {
  OpAttrs attrs;
  attrs.axis = axis;
  attrs.start = start;
  attrs.length = length;
  const Tensor<Scalar> in[] = {x};
  return apply<Scalar>(Opcode::slice, in, attrs);
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  OpAttrs attrs;
  attrs.shape = std::move(shape);
  const Tensor<Scalar> in[] = {x};
  return apply<Scalar>(Opcode::reshape, in, attrs);
}

template <typename Scalar>
Tensor<Scalar> clamp(const Tensor<Scalar>& x, double lo, double hi) {
  OpAttrs attrs;
  attrs.lo = lo;
  attrs.hi = hi;
  const Tensor<Scalar> in[] = {x};
  return apply<Scalar>(Opcode::clamp, in, attrs);
}

template <typename Scalar>
void backprop(const Tensor<Scalar>& loss) {
  if (!loss.defined()) throw Error("kernel", "backprop: undefined loss tensor");
  if (loss.numel() != 1) {
    throw Error("kernel", "backprop: loss must be a scalar, got shape " + shape_string(loss.shape()));
  }
  const auto& root = loss.node();
  if (!root->requires_grad || root->op == Opcode::leaf) {
    throw Error("kernel", "backprop: loss has no recorded graph");
  }

  std::vector<NodePtr<Scalar>> order;
  std::unordered_set<const NodeT<Scalar>*> seen;
  std::vector<NodePtr<Scalar>> stack{root};
  seen.insert(root.get());
  while (!stack.empty()) {
    NodePtr<Scalar> node = std::move(stack.back());
    stack.pop_back();
    for (const auto& in : node->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in);
    }
    order.push_back(std::move(node));
  }
  // Node ids grow with creation order, so descending id is a reverse
  // topological order of the recorded graph.
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a->id > b->id; });

  grad_buffer(*root) += Scalar(1);
  for (const auto& node : order) {
    if (node->op == Opcode::leaf) continue;
    if (node->grad.size() > 0) backward(*node);
    node->grad.resize(0);
    node->saved.clear();
    node->inputs.clear();
    node->op = Opcode::leaf;
    node->requires_grad = false;
  }
}

#define HSARNN_INSTANTIATE(S)                                                                         \
  template Tensor<S> apply<S>(Opcode, std::span<const Tensor<S>>, const OpAttrs&);                   \
  template Tensor<S> matmul<S>(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> conv2d<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, Index, Index);  \
  template Tensor<S> deconv2d<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, Index, Index, \
                                 Index);                                                              \
  template Tensor<S> add<S>(const Tensor<S>&, const Tensor<S>&);                                     \
  template Tensor<S> mul<S>(const Tensor<S>&, const Tensor<S>&);                                     \
  template Tensor<S> tanh<S>(const Tensor<S>&);                                                      \
  template Tensor<S> sigmoid<S>(const Tensor<S>&);                                                   \
  template Tensor<S> relu<S>(const Tensor<S>&);                                                      \
  template Tensor<S> softmax_lastdim<S>(const Tensor<S>&);                                           \
  template Tensor<S> mse_loss<S>(const Tensor<S>&, const Tensor<S>&);                                \
  template Tensor<S> cross_entropy_loss<S>(const Tensor<S>&, const Tensor<S>&);                      \
  template Tensor<S> concat<S>(std::span<const Tensor<S>>, Index);                                   \
  template Tensor<S> slice<S>(const Tensor<S>&, Index, Index, Index);                                \
  template Tensor<S> reshape<S>(const Tensor<S>&, Shape);                                            \
  template Tensor<S> sum<S>(const Tensor<S>&);                                                       \
  template Tensor<S> clamp<S>(const Tensor<S>&, double, double);                                     \
  template void backprop<S>(const Tensor<S>&);

HSARNN_INSTANTIATE(float)
HSARNN_INSTANTIATE(double)

#undef HSARNN_INSTANTIATE

}  // namespace hsarnn::kernel
