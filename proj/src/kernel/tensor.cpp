#include "hsarnn/kernel/tensor.hpp"

#include "hsarnn/error.hpp"

#include <array>
#include <sstream>
#include <utility>

namespace hsarnn::kernel {

namespace {

constexpr std::array<std::pair<Opcode, std::string_view>, 17> kOpcodeNames{{
    {Opcode::leaf, "leaf"},
    {Opcode::matmul, "matmul"},
    {Opcode::conv2d, "conv2d"},
    {Opcode::deconv2d, "deconv2d"},
    {Opcode::add, "add"},
    {Opcode::mul, "mul"},
    {Opcode::tanh, "tanh"},
    {Opcode::sigmoid, "sigmoid"},
    {Opcode::relu, "relu"},
    {Opcode::softmax_lastdim, "softmax_lastdim"},
    {Opcode::mse_loss, "mse_loss"},
    {Opcode::cross_entropy_loss, "cross_entropy_loss"},
    {Opcode::concat, "concat"},
    {Opcode::slice, "slice"},
    {Opcode::reshape, "reshape"},
    {Opcode::sum, "sum"},
    {Opcode::clamp, "clamp"},
}};

}  // namespace

std::string_view opcode_name(Opcode op) {
  for (const auto& [code, name] : kOpcodeNames) {
    if (code == op) return name;
  }
  return "unknown";
}

std::optional<Opcode> parse_opcode(std::string_view name) {
  for (const auto& [code, n] : kOpcodeNames) {
    if (n == name) return code;
  }
  return std::nullopt;
}

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::uint64_t next_node_id() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}

}  // namespace detail

namespace {
thread_local bool g_grad_enabled = true;
thread_local bool g_kink_probe = false;
thread_local std::uint64_t g_kink_print = 0;
}  // namespace

namespace detail {

bool kink_probe_active() { return g_kink_probe; }

void fold_kinks(std::uint64_t pattern_hash) {
  g_kink_print = (g_kink_print ^ pattern_hash) * 0x9e3779b97f4a7c15ULL + 0x7f4a7c15ULL;
}

}  // namespace detail

KinkProbe::KinkProbe() : previous_(g_kink_probe), saved_(g_kink_print) {
  g_kink_probe = true;
  g_kink_print = 0;
}

KinkProbe::~KinkProbe() {
  g_kink_probe = previous_;
  g_kink_print = saved_;
}

std::uint64_t KinkProbe::fingerprint() const { return g_kink_print; }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Array<Scalar> values, bool requires_grad) {
  for (Index d : shape) {
    if (d <= 0) throw ShapeError("leaf", "non-positive dimension in shape " + shape_string(shape));
  }
  if (kernel::numel(shape) != values.size()) {
    throw ShapeError("leaf", "shape " + shape_string(shape) + " holds " +
                                 std::to_string(kernel::numel(shape)) + " elements, got " +
                                 std::to_string(values.size()));
  }
  node_ = std::make_shared<detail::Node<Scalar>>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
  node_->id = detail::next_node_id();
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), Scalar(0), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::full(Shape shape, Scalar value, bool requires_grad) {
  const Index n = kernel::numel(shape);
  return Tensor(std::move(shape), Array<Scalar>::Constant(n, value), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::scalar(Scalar value, bool requires_grad) {
  return full(Shape{}, value, requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from_list(Shape shape, std::initializer_list<Scalar> values,
                                         bool requires_grad) {
  Array<Scalar> a(static_cast<Index>(values.size()));
  Index i = 0;
  for (Scalar v : values) a[i++] = v;
  return Tensor(std::move(shape), std::move(a), requires_grad);
}

namespace {

template <typename NodePtr>
const NodePtr& checked(const NodePtr& node) {
  if (!node) throw Error("kernel", "use of an undefined tensor");
  return node;
}

}  // namespace

template <typename Scalar>
const Shape& Tensor<Scalar>::shape() const {
  return checked(node_)->shape;
}

template <typename Scalar>
Index Tensor<Scalar>::dim(Index axis) const {
  const Shape& s = shape();
  if (axis < 0) axis += static_cast<Index>(s.size());
  if (axis < 0 || axis >= static_cast<Index>(s.size())) {
    throw ShapeError("dim", "axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  }
  return s[static_cast<std::size_t>(axis)];
}

template <typename Scalar>
const Array<Scalar>& Tensor<Scalar>::data() const {
  return checked(node_)->value;
}

template <typename Scalar>
Array<Scalar>& Tensor<Scalar>::mutable_data() {
  return checked(node_)->value;
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (numel() != 1) throw ShapeError("item", "tensor of shape " + shape_string(shape()) + " is not a scalar");
  return data()[0];
}

template <typename Scalar>
bool Tensor<Scalar>::requires_grad() const {
  return checked(node_)->requires_grad;
}

template <typename Scalar>
void Tensor<Scalar>::set_requires_grad(bool on) {
  checked(node_)->requires_grad = on;
}

template <typename Scalar>
bool Tensor<Scalar>::is_leaf() const {
  return checked(node_)->op == Opcode::leaf;
}

template <typename Scalar>
Opcode Tensor<Scalar>::opcode() const {
  return checked(node_)->op;
}

template <typename Scalar>
bool Tensor<Scalar>::has_grad() const {
  return checked(node_)->grad.size() > 0;
}

template <typename Scalar>
Array<Scalar> Tensor<Scalar>::grad() const {
  if (!has_grad()) return Array<Scalar>::Zero(numel());
  return node_->grad;
}

template <typename Scalar>
Array<Scalar>& Tensor<Scalar>::mutable_grad() {
  auto& node = *checked(node_);
  if (node.grad.size() == 0) node.grad = Array<Scalar>::Zero(node.value.size());
  return node.grad;
}

template <typename Scalar>
void Tensor<Scalar>::zero_grad() {
  checked(node_)->grad.resize(0);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  return Tensor(shape(), data(), false);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::clone() const {
  return Tensor(shape(), data(), requires_grad());
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace hsarnn::kernel
