#include "ov3d/npy.hpp"

#include <cstring>
#include <regex>
#include <string>

#include "ov3d/binary_io.hpp"
#include "ov3d/error.hpp"

namespace ov3d {

NpyArray parse_npy(const std::vector<std::uint8_t>& bytes, const std::string& what) {
  auto bad = [&](const std::string& msg) { fail(ErrorCode::Format, "npy " + what + ": " + msg); };
  if (bytes.size() < 10 || std::memcmp(bytes.data(), "\x93NUMPY", 6) != 0) {
    fail(ErrorCode::BadMagic, "bad magic: " + what + " is not an NPY file");
  }
  if (bytes[6] != 1 || bytes[7] != 0) {
    fail(ErrorCode::VersionMismatch, "npy " + what + ": only format version 1.0 is supported");
  }
  const std::size_t header_len = bytes[8] | (static_cast<std::size_t>(bytes[9]) << 8);
  if (bytes.size() < 10 + header_len) fail(ErrorCode::Truncated, "truncated: npy header of " + what);
  const std::string header(reinterpret_cast<const char*>(bytes.data() + 10), header_len);

  std::smatch m;
  if (!std::regex_search(header, m, std::regex(R"('descr'\s*:\s*'([^']*)')"))) bad("missing descr");
  const std::string descr = m[1];
  int width = 0;
  if (descr == "<f8") {
    width = 8;
  } else if (descr == "<f4") {
    width = 4;
  } else {
    bad("unsupported dtype " + descr);
  }
  if (!std::regex_search(header, m, std::regex(R"('fortran_order'\s*:\s*(True|False))"))) bad("missing fortran_order");
  if (m[1] == "True") bad("fortran order is not supported");
  if (!std::regex_search(header, m, std::regex(R"('shape'\s*:\s*\(([^)]*)\))"))) bad("missing shape");

  NpyArray out;
  const std::string dims = m[1];
  std::regex num(R"(\d+)");
  for (auto it = std::sregex_iterator(dims.begin(), dims.end(), num); it != std::sregex_iterator(); ++it)
    out.shape.push_back(static_cast<std::size_t>(std::stoull(it->str())));
  std::size_t count = 1;
  for (auto e : out.shape) count *= e;

  const std::size_t offset = 10 + header_len;
  if (bytes.size() < offset + count * width) fail(ErrorCode::Truncated, "truncated: npy payload of " + what);
  if (bytes.size() != offset + count * width) bad("payload size does not match shape");
  out.data.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint8_t* p = bytes.data() + offset + i * width;
    if (width == 8) {
      std::uint64_t bits = 0;
      for (int b = 7; b >= 0; --b) bits = (bits << 8) | p[b];
      double v;
      std::memcpy(&v, &bits, 8);
      out.data[i] = v;
    } else {
      std::uint32_t bits = 0;
      for (int b = 3; b >= 0; --b) bits = (bits << 8) | p[b];
      float v;
      std::memcpy(&v, &bits, 4);
      out.data[i] = v;
    }
  }
  return out;
}

NpyArray read_npy(const std::filesystem::path& path) { return parse_npy(read_file_bytes(path), path.string()); }

void write_npy(const NpyArray& array, const std::filesystem::path& path, bool single_precision) {
  std::size_t count = 1;
  for (auto e : array.shape) count *= e;
  require(count == array.data.size(), ErrorCode::ShapeMismatch, "write_npy: data size does not match shape");
  std::string shape = "(";
  for (std::size_t i = 0; i < array.shape.size(); ++i) {
    shape += std::to_string(array.shape[i]);
    if (array.shape.size() == 1 || i + 1 < array.shape.size()) shape += ",";
    if (i + 1 < array.shape.size()) shape += " ";
  }
  shape += ")";
  std::string header = std::string("{'descr': '") + (single_precision ? "<f4" : "<f8") +
                       "', 'fortran_order': False, 'shape': " + shape + ", }";
  // Pad with spaces so the payload starts on a 64-byte boundary.
  const std::size_t total = 10 + header.size() + 1;
  header.append((64 - total % 64) % 64, ' ');
  header += '\n';

  BinaryWriter w;
  w.magic("\x93NUMPY");
  w.u8(1);
  w.u8(0);
  w.u8(static_cast<std::uint8_t>(header.size() & 0xff));
  w.u8(static_cast<std::uint8_t>(header.size() >> 8));
  w.bytes({reinterpret_cast<const std::uint8_t*>(header.data()), header.size()});
  for (double v : array.data) {
    if (single_precision) {
      w.f32(static_cast<float>(v));
    } else {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      for (int b = 0; b < 8; ++b) w.u8(static_cast<std::uint8_t>(bits >> (8 * b)));
    }
  }
  w.save(path);
}

}  // namespace ov3d
