#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace hsarnn::data {

using Index = Eigen::Index;
using MotionMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ImageStack = Eigen::Array<float, Eigen::Dynamic, 1>;
using ImageMap = Eigen::Map<const Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline constexpr std::uint32_t kEpisodeVersion = 1;
inline constexpr char kEpisodeMagic[4] = {'H', 'S', 'E', 'P'};

/// Min-max range of one motion dimension. A degenerate range (max <= min)
/// normalizes every value to 0.
struct Bounds {
  double min = 0.0;
  double max = 0.0;

  bool degenerate() const { return !(max > min); }
  bool operator==(const Bounds&) const = default;
};

double normalize_value(double x, const Bounds& b);
double denormalize_value(double n, const Bounds& b);

/// Affine map of each column from [min, max] to [-1, 1].
MotionMatrix normalize(const MotionMatrix& raw, std::span<const Bounds> bounds);
MotionMatrix denormalize(const MotionMatrix& norm, std::span<const Bounds> bounds);

struct EpisodeMeta {
  std::string position;
  double hz = 10.0;
  std::uint64_t seed = 0;
  std::string sim_version;

  bool operator==(const EpisodeMeta&) const = default;
};

/// One demonstration. Images are stored frame-major, each frame row-major
/// height x width with values in [0, 1].
struct Episode {
  Index steps = 0;
  Index dims = 0;
  Index height = 64;
  Index width = 64;
  ImageStack images;
  MotionMatrix motions_raw;
  MotionMatrix motions_norm;
  std::vector<Bounds> bounds;
  EpisodeMeta meta;

  Index frame_size() const { return height * width; }
  ImageMap frame(Index t) const { return {images.data() + t * frame_size(), height, width}; }

  /// Checks array sizes against steps/dims and that motions_norm matches
  /// normalize(motions_raw, bounds) within 1e-6.
  void validate() const;
};

/// Per-dimension min/max over the raw motions of every episode.
std::vector<Bounds> compute_bounds(std::span<const Episode> episodes);
/// Copy of `ep` renormalized with `bounds`.
Episode with_bounds(const Episode& ep, std::vector<Bounds> bounds);

std::string serialize_episode(const Episode& ep);
Episode deserialize_episode(std::string_view bytes);

void write_episode(const Episode& ep, const std::filesystem::path& path);
Episode read_episode(const std::filesystem::path& path);

/// "<position>_<seed>.hsep"
std::string episode_filename(const std::string& position, std::uint64_t seed);
/// Every *.hsep file in `dir`, sorted by filename.
std::vector<std::filesystem::path> list_episode_files(const std::filesystem::path& dir);
std::vector<Episode> read_dataset(const std::filesystem::path& dir);

}  // namespace hsarnn::data
