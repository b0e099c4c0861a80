#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ov3d/image.hpp"

namespace ov3d {

/// Crop rectangle in pixels, half-open: columns [left, right), rows [upper, lower).
struct CropRect {
  int left = 0;
  int upper = 0;
  int right = 0;
  int lower = 0;

  int width() const { return right - left; }
  int height() const { return lower - upper; }
  bool operator==(const CropRect&) const = default;
};

std::string to_string(const CropRect& r);

/// Maps an image crop to a D-dimensional feature. Implementations must be
/// deterministic for a fixed crop.
class PatchEncoder {
 public:
  virtual ~PatchEncoder() = default;
  virtual int feature_dim() const = 0;
  virtual Eigen::VectorXf encode(const Image& image, const CropRect& rect) = 0;
  /// D x n features; the default loops over encode().
  virtual Eigen::MatrixXf encode_batch(const Image& image, std::span<const CropRect> rects);
};

struct ScaleSpec {
  std::vector<int> divisors{5, 7, 10};
};

inline constexpr int kMinPatchSize = 8;

/// Patch size per scale: floor(min(H, W) / divisor).
std::vector<int> patch_sizes(const ScaleSpec& spec, int height, int width);

struct MultiScaleFeatureMap {
  std::string image_id;
  std::vector<int> scales;  // patch size per scale
  int dim = 0;
  int height = 0;
  int width = 0;
  Eigen::VectorXf data;  // (s, d, y, x) row-major

  MultiScaleFeatureMap() = default;
  MultiScaleFeatureMap(std::string id, std::vector<int> patch, int d, int h, int w);

  int n_scales() const { return static_cast<int>(scales.size()); }
  Eigen::Index offset(int s, int d, int y, int x) const {
    return ((static_cast<Eigen::Index>(s) * dim + d) * height + y) * width + x;
  }
  float& at(int s, int d, int y, int x) { return data(offset(s, d, y, x)); }
  float at(int s, int d, int y, int x) const { return data(offset(s, d, y, x)); }
  Eigen::VectorXf feature(int s, int y, int x) const;
  /// N_s x D matrix of all scales at one pixel.
  Eigen::MatrixXf pixel(int y, int x) const;
};

struct ExtractOptions {
  bool jitter = true;          // false forces every randint draw to 0
  bool reverse_visit = false;  // encode/accumulate windows in reverse order
  bool half_precision = false;
};

/// Windows of one scale in visit order. Each window draws four offsets in
/// [0, stride) from `rng` in the order left, upper, right, lower.
std::vector<CropRect> plan_windows(int height, int width, int patch, std::mt19937_64& rng, bool jitter = true);

/// Per-pixel number of windows covering it.
Eigen::ArrayXXi coverage_count(int height, int width, std::span<const CropRect> rects);

/// Multi-scale, multi-spatial pixel features: every pixel receives the mean
/// of the features of all (jittered) sliding windows covering it.
MultiScaleFeatureMap extract_pixel_features(const Image& image, const ScaleSpec& spec, PatchEncoder& encoder,
                                            std::mt19937_64& rng, const ExtractOptions& options = {});

/// Blend of the scales at a pixel weighted by `selection`.
Eigen::VectorXf select_feature(const MultiScaleFeatureMap& map, int y, int x, const Eigen::VectorXf& selection);

inline constexpr std::uint32_t kFeatureMapVersion = 1;

/// "OVSF" file. Half precision storage is lossy by construction.
void write_feature_map(const MultiScaleFeatureMap& map, const std::filesystem::path& path,
                       bool half_precision = false);
MultiScaleFeatureMap read_feature_map(const std::filesystem::path& path);

}  // namespace ov3d
