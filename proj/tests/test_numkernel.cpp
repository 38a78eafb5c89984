#include "doctest.h"

#include "hsarnn/error.hpp"
#include "hsarnn/kernel/gradcheck.hpp"

#include <random>
#include <vector>

using namespace hsarnn::kernel;
using hsarnn::Error;
using hsarnn::ShapeError;

namespace {

Tensor<double> random_tensor(Shape shape, std::uint64_t seed, bool grad = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Array<double> v(numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor<double>(std::move(shape), std::move(v), grad);
}

}  // namespace

TEST_CASE("add with zeros is the identity") {
  auto x = random_tensor({3, 5}, 1);
  auto y = add(x, Tensor<double>::zeros({3, 5}));
  CHECK((y.data() == x.data()).all());
}

TEST_CASE("matmul with identity returns the input") {
  auto x = random_tensor({4, 4}, 2);
  Array<double> eye = Array<double>::Zero(16);
  for (int i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
  auto y = matmul(x, Tensor<double>({4, 4}, eye));
  CHECK((y.data() == x.data()).all());
}

TEST_CASE("softmax of zeros is uniform") {
  auto y = softmax_lastdim(Tensor<double>::zeros({4}));
  for (Index i = 0; i < 4; ++i) CHECK(y[i] == doctest::Approx(0.25));
}

TEST_CASE("softmax rows sum to one with entries in (0,1)") {
  auto x = Tensor<float>(Shape{6, 9}, (random_tensor({6, 9}, 3).data() * 3.0).cast<float>());
  auto y = softmax_lastdim(x);
  for (Index r = 0; r < 6; ++r) {
    double s = 0.0;
    for (Index c = 0; c < 9; ++c) {
      double v = y[r * 9 + c];
      CHECK(v > 0.0);
      CHECK(v < 1.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) <= 1e-6);
  }
}

TEST_CASE("shape mismatch names the opcode") {
  auto a = random_tensor({2, 3}, 4);
  auto b = random_tensor({4, 5}, 5);
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(e.opcode() == "matmul");
    CHECK(std::string(e.what()).find('3') != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(conv2d(random_tensor({1, 8, 8}, 6), random_tensor({2, 3, 3, 3}, 7), Tensor<double>(), 1, 1),
                  ShapeError);
}

TEST_CASE("unknown opcode is rejected") {
  std::vector<Tensor<double>> in{random_tensor({2}, 8)};
  CHECK_THROWS_AS(apply<double>(static_cast<Opcode>(200), in), Error);
  CHECK_FALSE(parse_opcode("gelu").has_value());
  CHECK(parse_opcode("deconv2d") == Opcode::deconv2d);
}

TEST_CASE("mse of a tensor with itself has zero gradient") {
  auto x = random_tensor({3, 4}, 9, true);
  backprop(mse_loss(x, x));
  CHECK((x.grad() == 0.0).all());
}

TEST_CASE("gradient of sum(2x) is 2") {
  auto x = random_tensor({5}, 10, true);
  backprop(sum(scale(x, 2.0)));
  CHECK((x.grad() == 2.0).all());
}

TEST_CASE("backprop rejects non-scalar and graph-free losses") {
  auto x = random_tensor({3}, 11, true);
  CHECK_THROWS_AS(backprop(tanh(x)), Error);
  CHECK_THROWS_AS(backprop(Tensor<double>::scalar(1.0)), Error);
  NoGradGuard guard;
  CHECK_THROWS_AS(backprop(sum(x)), Error);
}

TEST_CASE("gradients accumulate across branches") {
  auto x = random_tensor({6}, 12, true);
  auto w1 = random_tensor({6}, 13);
  auto w2 = random_tensor({6}, 14);

  backprop(sum(mul(tanh(x), w1)));
  Array<double> g1 = x.grad();
  x.zero_grad();
  backprop(sum(mul(sigmoid(x), w2)));
  Array<double> g2 = x.grad();
  x.zero_grad();
  backprop(add(sum(mul(tanh(x), w1)), sum(mul(sigmoid(x), w2))));
  CHECK((x.grad() == g1 + g2).all());
}

TEST_CASE("apply is deterministic") {
  auto x = random_tensor({1, 2, 9, 9}, 15);
  auto k = random_tensor({3, 2, 3, 3}, 16);
  auto b = random_tensor({3}, 17);
  auto y1 = conv2d(x, k, b, 2, 1);
  auto y2 = conv2d(x, k, b, 2, 1);
  CHECK((y1.data() == y2.data()).all());
}

TEST_CASE("conv2d matches a direct loop") {
  auto x = random_tensor({2, 7, 6}, 18);
  auto k = random_tensor({3, 2, 3, 3}, 19);
  auto b = random_tensor({3}, 20);
  auto y = conv2d(x, k, b, 2, 1);
  REQUIRE(y.numel() == 36);
  for (Index o = 0; o < 3; ++o)
    for (Index r = 0; r < 4; ++r)
      for (Index c = 0; c < 3; ++c) {
        double acc = b[o];
        for (Index i = 0; i < 2; ++i)
          for (Index u = 0; u < 3; ++u)
            for (Index v = 0; v < 3; ++v) {
              Index rr = r * 2 - 1 + u, cc = c * 2 - 1 + v;
              if (rr < 0 || rr >= 7 || cc < 0 || cc >= 6) continue;
              acc += k[((o * 2 + i) * 3 + u) * 3 + v] * x[(i * 7 + rr) * 6 + cc];
            }
        CHECK(y[(o * 4 + r) * 3 + c] == doctest::Approx(acc).epsilon(1e-12));
      }
}

TEST_CASE("deconv2d is the adjoint of conv2d") {
  auto x = random_tensor({1, 2, 8, 8}, 21);
  auto k = random_tensor({3, 2, 3, 3}, 22);
  auto y = random_tensor({1, 3, 4, 4}, 23);
  auto cx = conv2d(x, k, Tensor<double>(), 2, 1);
  auto ty = deconv2d(y, k, Tensor<double>(), 2, 1, 1);
  REQUIRE(ty.shape() == x.shape());
  double lhs = (cx.data() * y.data()).sum();
  double rhs = (x.data() * ty.data()).sum();
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("conv2d + tanh + mse matches finite differences") {
  auto x = random_tensor({1, 2, 6, 6}, 24, true);
  auto k = random_tensor({3, 2, 3, 3}, 25, true);
  auto b = random_tensor({3}, 26, true);
  auto t = random_tensor({1, 3, 6, 6}, 27);
  auto loss = [&] { return mse_loss(tanh(conv2d(x, k, b, 1, 1)), t); };
  CHECK(grad_check(loss, {x, k, b}) < 1e-4);
}

TEST_CASE("reference chains pass the gradient check") {
  ChainStep mm{Opcode::matmul, {}, 4};
  ChainStep th{Opcode::tanh, {}};
  ChainStep mse{Opcode::mse_loss, {}};
  CHECK(grad_check({mm, th, mse}, {4, 4}, 0) < 1e-4);

  OpAttrs strided;
  strided.stride = 2;
  strided.padding = 1;
  ChainStep conv{Opcode::conv2d, strided, 2, 3};
  ChainStep rl{Opcode::relu, {}};
  CHECK(grad_check({conv, rl, mse}, {1, 8, 8}, 0) < 1e-4);

  ChainStep sm{Opcode::softmax_lastdim, {}};
  ChainStep ce{Opcode::cross_entropy_loss, {}};
  CHECK(grad_check({sm, ce}, {16}, 0) < 1e-4);
}

TEST_CASE("every opcode passes over five seeds") {
  OpAttrs sl;
  sl.axis = 1;
  sl.start = 1;
  sl.length = 2;
  OpAttrs cat;
  cat.axis = 1;
  OpAttrs cl;
  cl.lo = -0.5;
  cl.hi = 0.5;
  OpAttrs rs;
  rs.shape = {12};
  OpAttrs dc;
  dc.stride = 2;
  dc.padding = 1;
  dc.output_padding = 1;
  std::vector<std::pair<std::vector<ChainStep>, Shape>> cases{
      {{{Opcode::matmul, {}, 3}}, {2, 4}},
      {{{Opcode::add, {}}}, {3, 4}},
      {{{Opcode::mul, {}}}, {3, 4}},
      {{{Opcode::sigmoid, {}}}, {5}},
      {{{Opcode::relu, {}}}, {3, 4}},
      {{{Opcode::clamp, cl}}, {3, 4}},
      {{{Opcode::concat, cat}}, {3, 4}},
      {{{Opcode::slice, sl}}, {3, 4}},
      {{{Opcode::reshape, rs}}, {3, 4}},
      {{{Opcode::sum, {}}}, {3, 4}},
      {{{Opcode::deconv2d, dc, 2, 3}}, {2, 4, 4}},
      {{{Opcode::tanh, {}}, {Opcode::mse_loss, {}}}, {3, 4}},
  };
  for (const auto& [chain, shape] : cases) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      CAPTURE(opcode_name(chain.front().op));
      CAPTURE(seed);
      CHECK(grad_check(chain, shape, seed) < 1e-4);
    }
  }
}

TEST_CASE("no-grad guard stops recording") {
  auto x = random_tensor({3}, 28, true);
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    CHECK(tanh(x).is_leaf());
  }
  CHECK(grad_enabled());
  CHECK_FALSE(tanh(x).is_leaf());
}

TEST_CASE("kink probe separates relu sides") {
  auto run = [](double v) {
    KinkProbe probe;
    relu(Tensor<double>::from_list({2}, {v, 1.0}));
    return probe.fingerprint();
  };
  CHECK(run(0.3) == run(0.7));
  CHECK(run(0.3) != run(-0.3));
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor<double>(Shape{2, 3}, Array<double>::Zero(5)), ShapeError);
  CHECK_THROWS_AS(Tensor<double>::zeros({0, 3}), ShapeError);
  auto x = random_tensor({2, 3}, 29, true);
  backprop(sum(x));
  CHECK(x.grad().size() == x.numel());
}
