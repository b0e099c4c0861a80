#include "ov3d/binary_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ov3d/error.hpp"

namespace ov3d {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid argument";
    case ErrorCode::ShapeMismatch: return "shape mismatch";
    case ErrorCode::OutOfRange: return "out of range";
    case ErrorCode::BadMagic: return "bad magic";
    case ErrorCode::VersionMismatch: return "version mismatch";
    case ErrorCode::Truncated: return "truncated";
    case ErrorCode::Io: return "i/o error";
    case ErrorCode::Format: return "format error";
    case ErrorCode::Numerical: return "numerical error";
    case ErrorCode::Encoder: return "encoder error";
  }
  return "unknown";
}

void BinaryWriter::bytes(std::span<const std::uint8_t> data) {
  buffer_.insert(buffer_.end(), data.begin(), data.end());
}

void BinaryWriter::magic(std::string_view tag) {
  for (char c : tag) buffer_.push_back(static_cast<std::uint8_t>(c));
}

void BinaryWriter::u8(std::uint8_t v) { buffer_.push_back(v); }

void BinaryWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buffer_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void BinaryWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void BinaryWriter::f16(float v) {
  const std::uint16_t h = float_to_half(v);
  buffer_.push_back(static_cast<std::uint8_t>(h & 0xff));
  buffer_.push_back(static_cast<std::uint8_t>(h >> 8));
}

void BinaryWriter::string(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  for (char c : s) buffer_.push_back(static_cast<std::uint8_t>(c));
}

void BinaryWriter::save(const std::filesystem::path& path) const {
  write_file_bytes(path, buffer_);
}

BinaryReader::BinaryReader(std::vector<std::uint8_t> data, std::string what)
    : data_(std::move(data)), what_(std::move(what)) {}

BinaryReader BinaryReader::from_file(const std::filesystem::path& path) {
  return BinaryReader(read_file_bytes(path), path.string());
}

void BinaryReader::need(std::size_t n) {
  if (data_.size() - pos_ < n) fail(ErrorCode::Truncated, "truncated: " + what_);
}

void BinaryReader::expect_magic(std::string_view tag) {
  need(tag.size());
  if (std::memcmp(data_.data() + pos_, tag.data(), tag.size()) != 0) {
    fail(ErrorCode::BadMagic, "bad magic: " + what_ + " (expected " + std::string(tag) + ")");
  }
  pos_ += tag.size();
}

std::uint8_t BinaryReader::u8() {
  need(1);
  return data_[pos_++];
}

std::uint32_t BinaryReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

float BinaryReader::f32() { return std::bit_cast<float>(u32()); }

float BinaryReader::f16() {
  need(2);
  const auto h = static_cast<std::uint16_t>(data_[pos_] | (data_[pos_ + 1] << 8));
  pos_ += 2;
  return half_to_float(h);
}

std::string BinaryReader::string() {
  const std::uint32_t n = u32();
  need(n);
  std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
  pos_ += n;
  return s;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) fail(ErrorCode::Io, "write failed: " + path.string());
}

// IEEE 754 binary16 conversions, round-to-nearest-even.
float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000) << 16;
  std::uint32_t exp = (h >> 10) & 0x1f;
  std::uint32_t mant = h & 0x3ff;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      exp = 127 - 15 + 1;
      while ((mant & 0x400) == 0) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3ff;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 31) {
    bits = sign | 0x7f800000 | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

std::uint16_t float_to_half(float f) {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
  const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000);
  const std::uint32_t absx = x & 0x7fffffff;
  if (absx >= 0x7f800000) {
    return static_cast<std::uint16_t>(sign | 0x7c00 | (absx > 0x7f800000 ? 0x200 : 0));
  }
  if (absx >= 0x477ff000) return static_cast<std::uint16_t>(sign | 0x7c00);  // overflow
  if (absx < 0x38800000) {
    // subnormal half
    const float af = std::bit_cast<float>(absx);
    const auto m = static_cast<std::uint32_t>(std::nearbyint(af * 16777216.0f));  // 2^24
    return static_cast<std::uint16_t>(sign | m);
  }
  std::uint32_t mant = absx & 0x7fffff;
  std::uint32_t exp = (absx >> 23) - 127 + 15;
  std::uint32_t half = (exp << 10) | (mant >> 13);
  const std::uint32_t rest = mant & 0x1fff;
  if (rest > 0x1000 || (rest == 0x1000 && (half & 1))) ++half;
  return static_cast<std::uint16_t>(sign | half);
}

}  // namespace ov3d
