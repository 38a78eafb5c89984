#include "hsarnn/datastore.hpp"

#include "hsarnn/binio.hpp"
#include "hsarnn/error.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>

namespace hsarnn::data {

using nlohmann::json;

double normalize_value(double x, const Bounds& b) {
  if (b.degenerate()) return 0.0;
  return 2.0 * (x - b.min) / (b.max - b.min) - 1.0;
}

double denormalize_value(double n, const Bounds& b) {
  if (b.degenerate()) return b.min;
  return b.min + (n + 1.0) * 0.5 * (b.max - b.min);
}

namespace {

template <typename Fn>
MotionMatrix map_columns(const MotionMatrix& in, std::span<const Bounds> bounds, Fn fn) {
  if (static_cast<Index>(bounds.size()) != in.cols()) {
    throw ConfigError("datastore", "have " + std::to_string(bounds.size()) + " bounds for " +
                                       std::to_string(in.cols()) + " motion dimensions");
  }
  MotionMatrix out(in.rows(), in.cols());
  for (Index r = 0; r < in.rows(); ++r) {
    for (Index c = 0; c < in.cols(); ++c) {
      out(r, c) = static_cast<float>(fn(static_cast<double>(in(r, c)), bounds[static_cast<std::size_t>(c)]));
    }
  }
  return out;
}

}  // namespace

MotionMatrix normalize(const MotionMatrix& raw, std::span<const Bounds> bounds) {
  return map_columns(raw, bounds, normalize_value);
}

MotionMatrix denormalize(const MotionMatrix& norm, std::span<const Bounds> bounds) {
  return map_columns(norm, bounds, denormalize_value);
}

void Episode::validate() const {
  if (steps < 1 || dims < 1 || height < 1 || width < 1) throw FormatError("datastore", "steps", "non-positive size");
  if (images.size() != steps * frame_size()) {
    throw FormatError("datastore", "images", "expected " + std::to_string(steps * frame_size()) + " values");
  }
  if (images.size() > 0 && (images.minCoeff() < 0.0f || images.maxCoeff() > 1.0f)) {
    throw FormatError("datastore", "images", "pixel values must lie in [0, 1]");
  }
  if (motions_raw.rows() != steps || motions_raw.cols() != dims) {
    throw FormatError("datastore", "motions_raw", "shape does not match steps x dims");
  }
  if (motions_norm.rows() != steps || motions_norm.cols() != dims) {
    throw FormatError("datastore", "motions_norm", "shape does not match steps x dims");
  }
  if (static_cast<Index>(bounds.size()) != dims) throw FormatError("datastore", "bounds", "one range per dimension");
  const MotionMatrix expect = normalize(motions_raw, bounds);
  if (((expect - motions_norm).cwiseAbs().array() > 1e-6f).any()) {
    throw FormatError("datastore", "motions_norm", "not reproducible from motions_raw and bounds");
  }
}

std::vector<Bounds> compute_bounds(std::span<const Episode> episodes) {
  if (episodes.empty()) throw ConfigError("datastore", "no episodes to compute bounds over");
  const Index dims = episodes.front().dims;
  std::vector<Bounds> out(static_cast<std::size_t>(dims));
  for (Index d = 0; d < dims; ++d) {
    double lo = INFINITY;
    double hi = -INFINITY;
    for (const auto& ep : episodes) {
      if (ep.dims != dims) throw ConfigError("datastore", "episodes disagree on motion dimensions");
      lo = std::min(lo, static_cast<double>(ep.motions_raw.col(d).minCoeff()));
      hi = std::max(hi, static_cast<double>(ep.motions_raw.col(d).maxCoeff()));
    }
    out[static_cast<std::size_t>(d)] = {lo, hi};
  }
  return out;
}

Episode with_bounds(const Episode& ep, std::vector<Bounds> bounds) {
  Episode out = ep;
  out.motions_norm = normalize(ep.motions_raw, bounds);
  out.bounds = std::move(bounds);
  return out;
}

std::string serialize_episode(const Episode& ep) {
  ep.validate();
  json meta;
  meta["steps"] = ep.steps;
  meta["dims"] = ep.dims;
  meta["height"] = ep.height;
  meta["width"] = ep.width;
  meta["dtype"] = "float32-le";
  meta["arrays"] = {"images", "motions_raw", "motions_norm"};
  json bounds = json::array();
  for (const auto& b : ep.bounds) bounds.push_back({b.min, b.max});
  meta["bounds"] = bounds;
  meta["position"] = ep.meta.position;
  meta["hz"] = ep.meta.hz;
  meta["seed"] = ep.meta.seed;
  meta["sim_version"] = ep.meta.sim_version;

  binio::Writer w;
  w.bytes(std::string_view(kEpisodeMagic, 4));
  w.u32(kEpisodeVersion);
  w.blob(meta.dump());
  w.f32s({ep.images.data(), static_cast<std::size_t>(ep.images.size())});
  w.f32s({ep.motions_raw.data(), static_cast<std::size_t>(ep.motions_raw.size())});
  w.f32s({ep.motions_norm.data(), static_cast<std::size_t>(ep.motions_norm.size())});
  return w.buffer();
}

Episode deserialize_episode(std::string_view bytes) {
  binio::Reader r(bytes, "datastore");
  if (r.bytes(4, "magic") != std::string_view(kEpisodeMagic, 4)) {
    throw FormatError("datastore", "magic", "not an HSEP episode file");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kEpisodeVersion) {
    throw FormatError("datastore", "version", "unsupported version " + std::to_string(version));
  }
  const std::string_view meta_text = r.blob("metadata_length");
  json meta;
  try {
    meta = json::parse(meta_text);
  } catch (const json::exception& e) {
    throw FormatError("datastore", "metadata", e.what());
  }

  Episode ep;
  try {
    ep.steps = meta.at("steps").get<Index>();
    ep.dims = meta.at("dims").get<Index>();
    ep.height = meta.at("height").get<Index>();
    ep.width = meta.at("width").get<Index>();
    for (const auto& b : meta.at("bounds")) ep.bounds.push_back({b.at(0).get<double>(), b.at(1).get<double>()});
    ep.meta.position = meta.at("position").get<std::string>();
    ep.meta.hz = meta.at("hz").get<double>();
    ep.meta.seed = meta.at("seed").get<std::uint64_t>();
    ep.meta.sim_version = meta.at("sim_version").get<std::string>();
    if (meta.at("dtype").get<std::string>() != "float32-le") throw FormatError("datastore", "dtype", "must be float32-le");
  } catch (const json::exception& e) {
    throw FormatError("datastore", "metadata", e.what());
  }
  if (ep.steps < 1 || ep.dims < 1 || ep.height < 1 || ep.width < 1) {
    throw FormatError("datastore", "steps", "non-positive array size in metadata");
  }
  const auto payload = static_cast<std::size_t>(ep.steps * (ep.frame_size() + 2 * ep.dims)) * sizeof(float);
  if (payload != r.remaining()) {
    throw FormatError("datastore", "steps", "metadata implies " + std::to_string(payload) + " payload bytes, file has " +
                                                std::to_string(r.remaining()));
  }
  ep.images.resize(ep.steps * ep.frame_size());
  ep.motions_raw.resize(ep.steps, ep.dims);
  ep.motions_norm.resize(ep.steps, ep.dims);
  r.f32s({ep.images.data(), static_cast<std::size_t>(ep.images.size())}, "images");
  r.f32s({ep.motions_raw.data(), static_cast<std::size_t>(ep.motions_raw.size())}, "motions_raw");
  r.f32s({ep.motions_norm.data(), static_cast<std::size_t>(ep.motions_norm.size())}, "motions_norm");
  ep.validate();
  return ep;
}

void write_episode(const Episode& ep, const std::filesystem::path& path) {
  binio::write_file(path, serialize_episode(ep), "datastore");
}

Episode read_episode(const std::filesystem::path& path) {
  return deserialize_episode(binio::read_file(path, "datastore"));
}

std::string episode_filename(const std::string& position, std::uint64_t seed) {
  return position + "_" + std::to_string(seed) + ".hsep";
}

std::vector<std::filesystem::path> list_episode_files(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error("datastore", "not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".hsep") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end(),
            [](const auto& a, const auto& b) { return a.filename().string() < b.filename().string(); });
  return files;
}

std::vector<Episode> read_dataset(const std::filesystem::path& dir) {
  std::vector<Episode> out;
  for (const auto& f : list_episode_files(dir)) out.push_back(read_episode(f));
  if (out.empty()) throw Error("datastore", "no .hsep files in " + dir.string());
  return out;
}

}  // namespace hsarnn::data
