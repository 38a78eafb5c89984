#include "hsarnn/binio.hpp"

#include "hsarnn/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace hsarnn::binio {

namespace {

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
  return v;
}

}  // namespace

void Writer::u32(std::uint32_t v) {
  const std::uint32_t le = to_le(v);
  char raw[4];
  std::memcpy(raw, &le, 4);
  buf_.append(raw, 4);
}

void Writer::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void Writer::f32s(std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    buf_.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(float));
  } else {
    for (float v : values) f32(v);
  }
}

void Writer::blob(std::string_view raw) {
  u32(static_cast<std::uint32_t>(raw.size()));
  bytes(raw);
}

std::string_view Reader::bytes(std::size_t n, const std::string& field) {
  if (n > remaining()) {
    throw FormatError(module_, field, "truncated: need " + std::to_string(n) + " bytes, " +
                                          std::to_string(remaining()) + " left");
  }
  const std::string_view out = data_.substr(pos_, n);
  pos_ += n;
  return out;
}

std::uint32_t Reader::u32(const std::string& field) {
  const auto raw = bytes(4, field);
  std::uint32_t v;
  std::memcpy(&v, raw.data(), 4);
  return to_le(v);
}

void Reader::f32s(std::span<float> out, const std::string& field) {
  const auto raw = bytes(out.size() * sizeof(float), field);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data(), raw.data(), raw.size());
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::uint32_t v;
      std::memcpy(&v, raw.data() + 4 * i, 4);
      out[i] = std::bit_cast<float>(to_le(v));
    }
  }
}

std::string_view Reader::blob(const std::string& field) {
  const std::uint32_t n = u32(field);
  if (n > remaining()) {
    throw FormatError(module_, field, "declares " + std::to_string(n) + " bytes but only " +
                                          std::to_string(remaining()) + " remain");
  }
  return bytes(n, field);
}

std::string read_file(const std::filesystem::path& path, const std::string& module) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(module, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view contents, const std::string& module) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(module, "cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw Error(module, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace hsarnn::binio
