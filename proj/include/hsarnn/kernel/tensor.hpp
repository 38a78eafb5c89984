#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace hsarnn::kernel {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Closed set of differentiable operators. `leaf` marks tensors created
/// directly from data (parameters, inputs, constants).
enum class Opcode : std::uint8_t {
  leaf,
  matmul,
  conv2d,
  deconv2d,
  add,
  mul,
  tanh,
  sigmoid,
  relu,
  softmax_lastdim,
  mse_loss,
  cross_entropy_loss,
  concat,
  slice,
  reshape,
  sum,
  clamp,
};

std::string_view opcode_name(Opcode op);
std::optional<Opcode> parse_opcode(std::string_view name);

/// Opcode-specific attributes. Only the fields an opcode reads matter.
struct OpAttrs {
  Index stride = 1;          // conv2d, deconv2d
  Index padding = 0;         // conv2d, deconv2d (explicit zero padding)
  Index output_padding = 0;  // deconv2d
  Index axis = 0;            // concat, slice
  Index start = 0;           // slice
  Index length = 0;          // slice
  Shape shape;               // reshape
  double lo = -1.0;          // clamp
  double hi = 1.0;           // clamp
};

Index numel(const Shape& shape);

/// False while a NoGradGuard is alive on the calling thread.
bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// While alive, every relu and clamp evaluated on the calling thread folds
/// its pattern of active and saturated elements into fingerprint(). Two
/// evaluations with equal fingerprints lie on the same linear piece of
/// every kink.
class KinkProbe {
 public:
  KinkProbe();
  ~KinkProbe();
  KinkProbe(const KinkProbe&) = delete;
  KinkProbe& operator=(const KinkProbe&) = delete;

  std::uint64_t fingerprint() const;

 private:
  bool previous_;
  std::uint64_t saved_;
};

std::string shape_string(const Shape& shape);

namespace detail {

template <typename Scalar>
struct Node {
  Shape shape;
  Array<Scalar> value;
  Array<Scalar> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  Opcode op = Opcode::leaf;
  OpAttrs attrs;
  std::vector<std::shared_ptr<Node>> inputs;
  std::vector<Array<Scalar>> saved;
  std::uint64_t id = 0;
};

std::uint64_t next_node_id();

bool kink_probe_active();
void fold_kinks(std::uint64_t pattern_hash);

}  // namespace detail

/// Dense row-major N-d array with optional gradient tracking. Copies share
/// the underlying node, so a parameter tensor can be held by a parameter
/// struct and referenced from many graphs at once.
template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;
  using NodePtr = std::shared_ptr<detail::Node<Scalar>>;

  Tensor() = default;
  Tensor(Shape shape, Array<Scalar> values, bool requires_grad = false);
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);
  static Tensor from_list(Shape shape, std::initializer_list<Scalar> values,
                          bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  Index rank() const { return static_cast<Index>(shape().size()); }
  Index dim(Index axis) const;
  Index numel() const { return static_cast<Index>(data().size()); }

  const Array<Scalar>& data() const;
  /// Writable view of the values. Meant for leaves (optimizer updates,
  /// finite-difference perturbation); writing into an interior node does not
  /// invalidate saved activations.
  Array<Scalar>& mutable_data();
  Scalar item() const;
  Scalar operator[](Index i) const { return data()[i]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;
  Opcode opcode() const;

  bool has_grad() const;
  /// Gradient of the last backprop; zeros when none has reached this tensor.
  Array<Scalar> grad() const;
  Array<Scalar>& mutable_grad();
  void zero_grad();

  /// Same values as a fresh leaf with no graph and no gradient tracking.
  Tensor detach() const;
  /// Deep copy of values into a new leaf carrying the same requires_grad flag.
  Tensor clone() const;

  const NodePtr& node() const noexcept { return node_; }

 private:
  NodePtr node_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

/// Elementwise precision conversion; the result is a leaf.
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t, bool requires_grad = false) {
  return Tensor<To>(t.shape(), t.data().template cast<To>(), requires_grad);
}

}  // namespace hsarnn::kernel
