#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace hsarnn::binio {

/// Appends fixed-width little-endian values to an in-memory buffer.
class Writer {
 public:
  void bytes(std::string_view raw) { buf_.append(raw); }
  void u32(std::uint32_t v);
  void f32(float v);
  void f32s(std::span<const float> values);
  /// u32 length followed by the raw bytes.
  void blob(std::string_view raw);

  const std::string& buffer() const noexcept { return buf_; }

 private:
  std::string buf_;
};

/// Bounds-checked little-endian reader. Every read names the field it is
/// decoding so truncation errors point at the field that ran short.
class Reader {
 public:
  Reader(std::string_view data, std::string module) : data_(data), module_(std::move(module)) {}

  std::string_view bytes(std::size_t n, const std::string& field);
  std::uint32_t u32(const std::string& field);
  void f32s(std::span<float> out, const std::string& field);
  std::string_view blob(const std::string& field);

  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  bool done() const noexcept { return pos_ == data_.size(); }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
  std::string module_;
};

std::string read_file(const std::filesystem::path& path, const std::string& module);
/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
void write_file(const std::filesystem::path& path, std::string_view contents, const std::string& module);

}  // namespace hsarnn::binio
