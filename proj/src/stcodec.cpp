#include "hsarnn/stcodec.hpp"

#include "hsarnn/error.hpp"

#include <algorithm>
#include <cmath>

namespace hsarnn::st {

void StCodecConfig::validate() const {
  if (bins < 2) throw ConfigError("stcodec", "bins must be >= 2");
  if (!(hi > lo)) throw ConfigError("stcodec", "hi must exceed lo");
  if (!(sigma_bins > 0.0)) throw ConfigError("stcodec", "sigma_bins must be positive");
}

bool operator==(const StCodecConfig& a, const StCodecConfig& b) {
  return a.bins == b.bins && a.lo == b.lo && a.hi == b.hi && a.sigma_bins == b.sigma_bins;
}

BinDistribution::BinDistribution(std::vector<double> p) : p_(std::move(p)) {
  if (p_.empty()) throw Error("stcodec", "empty distribution");
  double total = 0.0;
  for (double v : p_) {
    if (!std::isfinite(v) || v < 0.0) throw Error("stcodec", "distribution entries must be finite and nonnegative");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-6) throw Error("stcodec", "distribution sums to " + std::to_string(total));
}

BinDistribution encode_scalar(double x, const StCodecConfig& cfg, CodecStats* stats) {
  cfg.validate();
  if (std::isnan(x)) throw Error("stcodec", "cannot encode NaN");
  if (x < cfg.lo || x > cfg.hi) {
    x = std::clamp(x, cfg.lo, cfg.hi);
    if (stats) ++stats->clamped;
  }
  // Position in bin units.
  const double u = (x - cfg.lo) * static_cast<double>(cfg.bins - 1) / (cfg.hi - cfg.lo);
  const double inv = 1.0 / (2.0 * cfg.sigma_bins * cfg.sigma_bins);
  std::vector<double> p(static_cast<std::size_t>(cfg.bins));
  double total = 0.0;
  for (Index i = 0; i < cfg.bins; ++i) {
    const double d = static_cast<double>(i) - u;
    const double v = std::exp(-d * d * inv);
    p[static_cast<std::size_t>(i)] = v;
    total += v;
  }
  for (double& v : p) v /= total;
  return BinDistribution(std::move(p));
}

Index argmax_lower(std::span<const double> p) {
  if (p.empty()) throw Error("stcodec", "cannot decode an empty distribution");
  Index best = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (std::isnan(p[i])) throw Error("stcodec", "distribution contains NaN");
    if (p[i] > p[static_cast<std::size_t>(best)]) best = static_cast<Index>(i);
  }
  return best;
}

double decode_dist(std::span<const double> p, const StCodecConfig& cfg) {
  if (static_cast<Index>(p.size()) != cfg.bins) {
    throw Error("stcodec", "distribution has " + std::to_string(p.size()) + " bins, config expects " +
                               std::to_string(cfg.bins));
  }
  return cfg.center(argmax_lower(p));
}

double decode_dist(const BinDistribution& p, const StCodecConfig& cfg) {
  return decode_dist(p.probabilities(), cfg);
}

template <typename Scalar>
std::vector<double> decode_rows(const kernel::Tensor<Scalar>& scores, const StCodecConfig& cfg) {
  if (scores.rank() < 1 || scores.shape().back() != cfg.bins) {
    throw ShapeError("decode_rows", "expected [..., " + std::to_string(cfg.bins) + "], got " +
                                        kernel::shape_string(scores.shape()));
  }
  const Index rows = scores.numel() / cfg.bins;
  std::vector<double> out(static_cast<std::size_t>(rows));
  std::vector<double> row(static_cast<std::size_t>(cfg.bins));
  for (Index r = 0; r < rows; ++r) {
    for (Index j = 0; j < cfg.bins; ++j) row[static_cast<std::size_t>(j)] = scores.data()[r * cfg.bins + j];
    out[static_cast<std::size_t>(r)] = decode_dist(row, cfg);
  }
  return out;
}

template <typename Scalar>
kernel::Tensor<Scalar> encode_targets(std::span<const double> values, const StCodecConfig& cfg, CodecStats* stats) {
  const auto rows = static_cast<Index>(values.size());
  if (rows == 0) throw Error("stcodec", "no values to encode");
  kernel::Array<Scalar> data(rows * cfg.bins);
  for (Index r = 0; r < rows; ++r) {
    const BinDistribution p = encode_scalar(values[static_cast<std::size_t>(r)], cfg, stats);
    for (Index j = 0; j < cfg.bins; ++j) data[r * cfg.bins + j] = static_cast<Scalar>(p[j]);
  }
  return kernel::Tensor<Scalar>({rows, cfg.bins}, std::move(data));
}

template <typename Scalar>
kernel::Tensor<Scalar> st_loss(const kernel::Tensor<Scalar>& logits, const kernel::Tensor<Scalar>& targets) {
  if (logits.shape() != targets.shape()) {
    throw ShapeError("st_loss", "logits " + kernel::shape_string(logits.shape()) + " vs targets " +
                                    kernel::shape_string(targets.shape()));
  }
  return kernel::cross_entropy_loss(logits, targets);
}

template <typename Scalar>
kernel::Tensor<Scalar> st_loss(const kernel::Tensor<Scalar>& logits, std::span<const BinDistribution> targets) {
  const auto rows = static_cast<Index>(targets.size());
  if (rows == 0 || logits.numel() % rows != 0) {
    throw ShapeError("st_loss", "logits " + kernel::shape_string(logits.shape()) + " vs " + std::to_string(rows) +
                                    " targets");
  }
  const Index bins = targets[0].size();
  kernel::Array<Scalar> data(rows * bins);
  for (Index r = 0; r < rows; ++r) {
    const auto& t = targets[static_cast<std::size_t>(r)];
    if (t.size() != bins) throw ShapeError("st_loss", "targets have differing bin counts");
    for (Index j = 0; j < bins; ++j) data[r * bins + j] = static_cast<Scalar>(t[j]);
  }
  kernel::Shape shape = logits.shape();
  if (logits.numel() != rows * bins) {
    throw ShapeError("st_loss", "logits " + kernel::shape_string(shape) + " vs " + std::to_string(rows) + "x" +
                                    std::to_string(bins) + " targets");
  }
  return st_loss(logits, kernel::Tensor<Scalar>(std::move(shape), std::move(data)));
}

double entropy(const BinDistribution& p) {
  double h = 0.0;
  for (double v : p.probabilities()) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

#define HSARNN_INSTANTIATE(S)                                                                                      \
  template std::vector<double> decode_rows<S>(const kernel::Tensor<S>&, const StCodecConfig&);                    \
  template kernel::Tensor<S> encode_targets<S>(std::span<const double>, const StCodecConfig&, CodecStats*);       \
  template kernel::Tensor<S> st_loss<S>(const kernel::Tensor<S>&, const kernel::Tensor<S>&);                      \
  template kernel::Tensor<S> st_loss<S>(const kernel::Tensor<S>&, std::span<const BinDistribution>);

HSARNN_INSTANTIATE(float)
HSARNN_INSTANTIATE(double)

#undef HSARNN_INSTANTIATE

}  // namespace hsarnn::st
