#include "doctest.h"

#include "hsarnn/binio.hpp"
#include "hsarnn/datastore.hpp"
#include "hsarnn/error.hpp"

#include <filesystem>
#include <random>

using namespace hsarnn::data;
namespace fs = std::filesystem;

namespace {

Episode synthetic(Index steps, std::uint64_t seed, const std::string& position = "B") {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> pix(0.0f, 1.0f);
  std::uniform_real_distribution<float> mot(-0.3f, 0.7f);
  Episode ep;
  ep.steps = steps;
  ep.dims = 3;
  ep.images.resize(steps * ep.frame_size());
  for (auto& v : ep.images) v = pix(rng);
  ep.motions_raw.resize(steps, 3);
  for (Index i = 0; i < ep.motions_raw.size(); ++i) ep.motions_raw.data()[i] = mot(rng);
  std::array<Episode, 1> one{ep};
  ep.bounds = compute_bounds(one);
  ep.motions_norm = normalize(ep.motions_raw, ep.bounds);
  ep.meta = {position, 10.0, seed, "stacksim-1"};
  return ep;
}

fs::path scratch() {
  fs::path dir = fs::temp_directory_path() / "hsarnn_test_datastore";
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("normalization endpoints") {
  Bounds b{-0.2, 0.6};
  CHECK(normalize_value(-0.2, b) == -1.0);
  CHECK(normalize_value(0.6, b) == 1.0);
  CHECK(normalize_value(0.2, b) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(denormalize_value(0.0, b) == doctest::Approx(0.2));
  Bounds flat{0.3, 0.3};
  CHECK(flat.degenerate());
  CHECK(normalize_value(0.3, flat) == 0.0);
  CHECK(normalize_value(5.0, flat) == 0.0);
}

TEST_CASE("normalization round trip on 1e4 random vectors") {
  std::mt19937_64 rng(0);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  std::vector<Bounds> bounds{{-5.0, 5.0}, {0.0, 0.3}, {-1.0, 2.0}};
  MotionMatrix raw(10000, 3);
  for (Index r = 0; r < raw.rows(); ++r)
    for (Index d = 0; d < 3; ++d) raw(r, d) = static_cast<float>(bounds[d].min + (u(rng) + 5.0) / 10.0 * (bounds[d].max - bounds[d].min));
  MotionMatrix norm = normalize(raw, bounds);
  CHECK((norm.array().abs() <= 1.0f).all());
  MotionMatrix back = denormalize(norm, bounds);
  CHECK((back - raw).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("bounds span every episode") {
  std::array<Episode, 2> eps{synthetic(5, 1), synthetic(7, 2)};
  auto bounds = compute_bounds(eps);
  REQUIRE(bounds.size() == 3);
  for (Index d = 0; d < 3; ++d) {
    float lo = std::min(eps[0].motions_raw.col(d).minCoeff(), eps[1].motions_raw.col(d).minCoeff());
    float hi = std::max(eps[0].motions_raw.col(d).maxCoeff(), eps[1].motions_raw.col(d).maxCoeff());
    CHECK(bounds[d].min == lo);
    CHECK(bounds[d].max == hi);
  }
  Episode shifted = with_bounds(eps[0], bounds);
  CHECK_NOTHROW(shifted.validate());
  CHECK((shifted.motions_norm.array().abs() <= 1.0f).all());
}

TEST_CASE("write, read, write is byte-identical") {
  const fs::path dir = scratch();
  Episode ep = synthetic(6, 3);
  write_episode(ep, dir / "a.hsep");
  Episode back = read_episode(dir / "a.hsep");
  write_episode(back, dir / "b.hsep");
  const std::string a = hsarnn::binio::read_file(dir / "a.hsep", "test");
  const std::string b = hsarnn::binio::read_file(dir / "b.hsep", "test");
  CHECK(a == b);
  CHECK(a.substr(0, 4) == "HSEP");
  CHECK((back.images == ep.images).all());
  CHECK(back.motions_raw == ep.motions_raw);
  CHECK(back.motions_norm == ep.motions_norm);
  CHECK(back.bounds == ep.bounds);
  CHECK(back.meta == ep.meta);
}

TEST_CASE("stored normalized motions can be rederived") {
  Episode ep = deserialize_episode(serialize_episode(synthetic(4, 4)));
  MotionMatrix again = normalize(ep.motions_raw, ep.bounds);
  CHECK((again - ep.motions_norm).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("structured errors for damaged files") {
  const std::string bytes = serialize_episode(synthetic(3, 5));
  auto field_of = [](const std::string& data) {
    try {
      deserialize_episode(data);
    } catch (const hsarnn::FormatError& e) {
      return e.field();
    }
    return std::string("none");
  };
  std::string magic = bytes;
  magic[1] = 'X';
  CHECK(field_of(magic) == "magic");
  std::string version = bytes;
  version[4] = 2;
  CHECK(field_of(version) == "version");
  std::string length = bytes;
  length[11] = static_cast<char>(0x7f);
  CHECK(field_of(length) == "metadata_length");
  CHECK(field_of(bytes.substr(0, bytes.size() - 4)) == "steps");
  CHECK(field_of(bytes.substr(0, 10)) == "metadata_length");

  Episode bad = synthetic(3, 6);
  bad.motions_norm(0, 0) += 0.1f;
  CHECK_THROWS_AS(bad.validate(), hsarnn::FormatError);
  Episode shape = synthetic(3, 7);
  shape.steps = 4;
  CHECK_THROWS_AS(shape.validate(), hsarnn::FormatError);
}

TEST_CASE("dataset directory layout") {
  const fs::path dir = scratch();
  CHECK(episode_filename("C", 0) == "C_0.hsep");
  write_episode(synthetic(2, 8, "E"), dir / episode_filename("E", 0));
  write_episode(synthetic(2, 9, "A"), dir / episode_filename("A", 0));
  auto files = list_episode_files(dir);
  REQUIRE(files.size() == 2);
  CHECK(files[0].filename() == "A_0.hsep");
  auto data = read_dataset(dir);
  CHECK(data[1].meta.position == "E");
  CHECK_THROWS_AS(read_episode(dir / "missing.hsep"), hsarnn::Error);
}
