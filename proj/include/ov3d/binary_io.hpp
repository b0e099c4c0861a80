#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ov3d {

/// Little-endian byte sink used by every on-disk format in the project.
class BinaryWriter {
 public:
  void bytes(std::span<const std::uint8_t> data);
  void magic(std::string_view tag);
  void u8(std::uint8_t v);
  void u32(std::uint32_t v);
  void f32(float v);
  void f16(float v);
  /// u32 length followed by raw bytes.
  void string(std::string_view s);

  const std::vector<std::uint8_t>& buffer() const { return buffer_; }
  void save(const std::filesystem::path& path) const;

 private:
  std::vector<std::uint8_t> buffer_;
};

/// Bounds-checked little-endian reader. Every read past the end raises
/// ErrorCode::Truncated naming `what`.
class BinaryReader {
 public:
  BinaryReader(std::vector<std::uint8_t> data, std::string what);
  static BinaryReader from_file(const std::filesystem::path& path);

  void expect_magic(std::string_view tag);
  std::uint8_t u8();
  std::uint32_t u32();
  float f32();
  float f16();
  std::string string();

  bool at_end() const { return pos_ == data_.size(); }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n);

  std::vector<std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::string what_;
};

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> data);

float half_to_float(std::uint16_t h);
std::uint16_t float_to_half(float f);

}  // namespace ov3d
