#pragma once

#include "hsarnn/kernel/ops.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace hsarnn::st {

using kernel::Index;

/// Bin layout shared by every motion dimension. Bin centers are
/// lo + i * (hi - lo) / (bins - 1), i in [0, bins).
struct StCodecConfig {
  Index bins = 2000;
  double lo = -1.0;
  double hi = 1.0;
  double sigma_bins = 10.0;  // width of the teacher bump, in bins

  void validate() const;
  double delta() const { return (hi - lo) / static_cast<double>(bins - 1); }
  double center(Index i) const { return lo + static_cast<double>(i) * delta(); }
};

bool operator==(const StCodecConfig& a, const StCodecConfig& b);

/// Nonnegative probabilities over the bins, summing to 1.
class BinDistribution {
 public:
  /// Validates the invariant (finite, nonnegative, sum 1 +- 1e-6).
  explicit BinDistribution(std::vector<double> p);

  std::span<const double> probabilities() const { return p_; }
  Index size() const { return static_cast<Index>(p_.size()); }
  double operator[](Index i) const { return p_[static_cast<std::size_t>(i)]; }

 private:
  std::vector<double> p_;
};

/// Counts inputs that had to be clamped into [lo, hi].
struct CodecStats {
  std::size_t clamped = 0;
};

/// Gaussian bump over bin centers, centred on x. Values outside [lo, hi]
/// are clamped and counted in `stats`.
BinDistribution encode_scalar(double x, const StCodecConfig& cfg, CodecStats* stats = nullptr);

/// Index of the largest entry; ties resolve to the lower index. Throws on
/// empty input or NaN.
Index argmax_lower(std::span<const double> p);

/// Center of the most probable bin.
double decode_dist(std::span<const double> p, const StCodecConfig& cfg);
double decode_dist(const BinDistribution& p, const StCodecConfig& cfg);

/// Decodes every row of a logits/probability tensor [..., bins]. argmax is
/// invariant under softmax, so raw logits decode the same as their softmax.
template <typename Scalar>
std::vector<double> decode_rows(const kernel::Tensor<Scalar>& scores, const StCodecConfig& cfg);

/// Stacks encode_scalar(x) for each value into a [values.size(), bins] tensor.
template <typename Scalar>
kernel::Tensor<Scalar> encode_targets(std::span<const double> values, const StCodecConfig& cfg,
                                      CodecStats* stats = nullptr);

/// Mean over motion dimensions (rows) of the cross-entropy between
/// softmax(logits) and the target distributions. logits [..., D, bins].
template <typename Scalar>
kernel::Tensor<Scalar> st_loss(const kernel::Tensor<Scalar>& logits, const kernel::Tensor<Scalar>& targets);

template <typename Scalar>
kernel::Tensor<Scalar> st_loss(const kernel::Tensor<Scalar>& logits, std::span<const BinDistribution> targets);

/// Shannon entropy in nats; the minimum of st_loss for a given target.
double entropy(const BinDistribution& p);

}  // namespace hsarnn::st
