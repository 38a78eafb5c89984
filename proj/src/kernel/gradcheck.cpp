#include "hsarnn/kernel/gradcheck.hpp"

#include "hsarnn/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace hsarnn::kernel {

double grad_check(const std::function<Tensor<double>()>& loss_fn, std::vector<Tensor<double>> params,
                  const GradCheckOptions& options, GradCheckStats* stats) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  backprop(loss_fn());
  std::vector<Array<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad());

  auto evaluate = [&](std::uint64_t* print) {
    const KinkProbe probe;
    const double value = loss_fn().item();
    *print = probe.fingerprint();
    return value;
  };

  std::mt19937_64 rng(options.seed);
  GradCheckStats local;
  double worst = 0.0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& values = params[t].mutable_data();
    std::vector<Index> coords(static_cast<std::size_t>(values.size()));
    std::iota(coords.begin(), coords.end(), Index{0});
    const bool sampled = options.max_coords_per_tensor > 0 && values.size() > options.max_coords_per_tensor;
    if (sampled) std::shuffle(coords.begin(), coords.end(), rng);
    Index checked = 0;
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (Index i : coords) {
      if (sampled && checked >= options.max_coords_per_tensor) break;
      const double saved = values[i];
      std::uint64_t print_up = 0, print_down = 0;
      values[i] = saved + options.eps;
      const double up = evaluate(&print_up);
      values[i] = saved - options.eps;
      const double down = evaluate(&print_down);
      values[i] = saved;
      if (options.skip_kinks && print_up != print_down) {
        ++local.skipped;
        continue;
      }
      ++checked;
      const double numeric = (up - down) / (2.0 * options.eps);
      const double a = analytic[t][i];
      if (options.metric == ErrorMetric::elementwise) {
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(a - numeric) / denom);
      } else {
        diff2 += (a - numeric) * (a - numeric);
        a2 += a * a;
        n2 += numeric * numeric;
      }
    }
    if (options.metric == ErrorMetric::tensor_norm) {
      worst = std::max(worst, std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-8}));
    }
    local.checked += checked;
  }
  if (stats) {
    stats->checked += local.checked;
    stats->skipped += local.skipped;
  }
  return worst;
}

namespace {

using T = Tensor<double>;

T random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Array<double> values(numel(shape));
  for (auto& v : values) v = u(rng);
  return T(std::move(shape), std::move(values), requires_grad);
}

Shape with_last(Shape s, Index last) {
  s.back() = last;
  return s;
}

}  // namespace

double grad_check(const std::vector<ChainStep>& chain, const Shape& input_shape, std::uint64_t seed,
                  GradCheckStats* stats) {
  std::mt19937_64 rng(seed);
  T input = random_tensor(input_shape, rng, true);
  std::vector<T> params{input};

  // Operands are drawn once, in chain order, while shapes are propagated;
  // the closure below only replays the recorded wiring.
  struct Wired {
    ChainStep step;
    T operand;  // second operand, target, or bias; may be undefined
    T bias;
  };
  std::vector<Wired> wiring;
  Shape shape = input_shape;
  bool closed = false;
  for (const auto& step : chain) {
    if (closed) throw Error("kernel", "grad_check: a loss opcode must terminate the chain");
    Wired w{step, {}, {}};
    switch (step.op) {
      case Opcode::matmul: {
        const Index out = step.features > 0 ? step.features : shape.back();
        w.operand = random_tensor({shape.back(), out}, rng, true);
        shape = with_last(shape, out);
        break;
      }
      case Opcode::conv2d:
      case Opcode::deconv2d: {
        if (shape.size() < 3) throw ShapeError(std::string(opcode_name(step.op)), "chain input must be image-shaped");
        const Index in_c = shape[shape.size() - 3];
        const Index out_c = step.features > 0 ? step.features : in_c;
        const Index k = step.kernel;
        const bool conv = step.op == Opcode::conv2d;
        w.operand = random_tensor(conv ? Shape{out_c, in_c, k, k} : Shape{in_c, out_c, k, k}, rng, true);
        w.bias = random_tensor({out_c}, rng, true);
        const Index s = step.attrs.stride;
        const Index p = step.attrs.padding;
        auto side = [&](Index n) {
          return conv ? (n + 2 * p - k) / s + 1 : (n - 1) * s - 2 * p + k + step.attrs.output_padding;
        };
        shape[shape.size() - 3] = out_c;
        shape[shape.size() - 2] = side(shape[shape.size() - 2]);
        shape.back() = side(shape.back());
        break;
      }
      case Opcode::add:
      case Opcode::mul:
        w.operand = random_tensor(shape, rng, true);
        break;
      case Opcode::concat: {
        w.operand = random_tensor(shape, rng, true);
        Index axis = step.attrs.axis < 0 ? step.attrs.axis + static_cast<Index>(shape.size()) : step.attrs.axis;
        shape[static_cast<std::size_t>(axis)] *= 2;
        break;
      }
      case Opcode::slice: {
        Index axis = step.attrs.axis < 0 ? step.attrs.axis + static_cast<Index>(shape.size()) : step.attrs.axis;
        shape[static_cast<std::size_t>(axis)] = step.attrs.length;
        break;
      }
      case Opcode::reshape:
        shape = step.attrs.shape;
        break;
      case Opcode::mse_loss:
        w.operand = random_tensor(shape, rng, false);
        closed = true;
        break;
      case Opcode::cross_entropy_loss: {
        T logits = random_tensor(shape, rng, false);
        w.operand = softmax_lastdim(logits).detach();
        closed = true;
        break;
      }
      case Opcode::sum:
        closed = true;
        break;
      default:
        break;
    }
    if (w.operand.defined() && w.operand.requires_grad()) params.push_back(w.operand);
    if (w.bias.defined()) params.push_back(w.bias);
    wiring.push_back(std::move(w));
  }
  T weights;
  if (!closed) weights = random_tensor(shape, rng, false);

  auto loss_fn = [&]() {
    T x = input;
    for (const auto& w : wiring) {
      switch (w.step.op) {
        case Opcode::conv2d:
        case Opcode::deconv2d: {
          const T in[] = {x, w.operand, w.bias};
          x = apply<double>(w.step.op, in, w.step.attrs);
          break;
        }
        case Opcode::matmul:
        case Opcode::add:
        case Opcode::mul:
        case Opcode::concat:
        case Opcode::mse_loss:
        case Opcode::cross_entropy_loss: {
          const T in[] = {x, w.operand};
          x = apply<double>(w.step.op, in, w.step.attrs);
          break;
        }
        default: {
          const T in[] = {x};
          x = apply<double>(w.step.op, in, w.step.attrs);
          break;
        }
      }
    }
    if (weights.defined()) x = sum(mul(x, weights));
    return x;
  };
  return grad_check(loss_fn, params, GradCheckOptions{1e-5, 0, seed}, stats);
}

}  // namespace hsarnn::kernel
