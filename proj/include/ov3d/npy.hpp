#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <filesystem>
#include <vector>

namespace ov3d {

/// Minimal NPY v1.0 container: little-endian f8 or f4, C order.
struct NpyArray {
  std::vector<std::size_t> shape;
  std::vector<double> data;
};

NpyArray read_npy(const std::filesystem::path& path);
NpyArray parse_npy(const std::vector<std::uint8_t>& bytes, const std::string& what);
void write_npy(const NpyArray& array, const std::filesystem::path& path, bool single_precision = false);

}  // namespace ov3d
