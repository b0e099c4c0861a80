#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

namespace ov3d {

using Plane = Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using LabelMap = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr std::uint8_t kUnlabeled = 255;

/// RGB image with values in [0, 1], one row-major plane per channel.
struct Image {
  std::string id;
  std::filesystem::path path;
  std::array<Plane, 3> rgb;

  Image() = default;
  Image(int height, int width) {
    for (auto& p : rgb) p = Plane::Zero(height, width);
  }

  int height() const { return static_cast<int>(rgb[0].rows()); }
  int width() const { return static_cast<int>(rgb[0].cols()); }
  Eigen::Vector3f pixel(int y, int x) const { return {rgb[0](y, x), rgb[1](y, x), rgb[2](y, x)}; }
  void set_pixel(int y, int x, const Eigen::Vector3f& c) {
    for (int k = 0; k < 3; ++k) rgb[static_cast<std::size_t>(k)](y, x) = c(k);
  }
};

/// PNG or JPEG, detected from the file signature. Gray and alpha inputs are
/// expanded/dropped to RGB.
Image read_image(const std::filesystem::path& path);
void write_png(const Image& image, const std::filesystem::path& path);

/// Box-filter downsampling by an integer factor (trailing pixels dropped).
Image downsample_image(const Image& image, int factor);

/// Palette-indexed PNG: the stored indices are returned as-is. 8-bit
/// grayscale files are accepted with the gray level as the index.
LabelMap read_indexed_png(const std::filesystem::path& path);
void write_indexed_png(const LabelMap& labels, const std::filesystem::path& path);

void write_gray_png(const Plane& values, const std::filesystem::path& path);  // values clamped to [0, 1]
Plane read_gray_png(const std::filesystem::path& path);

/// Fixed 256-entry colormap used for label PNGs (index 255 is white).
const std::array<std::array<std::uint8_t, 3>, 256>& label_palette();

}  // namespace ov3d
