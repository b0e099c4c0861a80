#include "ov3d/patchfeat.hpp"

#include <algorithm>

#include "ov3d/binary_io.hpp"
#include "ov3d/error.hpp"
#include "ov3d/numerics.hpp"

namespace ov3d {

std::string to_string(const CropRect& r) {
  return "(" + std::to_string(r.left) + ", " + std::to_string(r.upper) + ", " + std::to_string(r.right) + ", " +
         std::to_string(r.lower) + ")";
}

Eigen::MatrixXf PatchEncoder::encode_batch(const Image& image, std::span<const CropRect> rects) {
  Eigen::MatrixXf out(feature_dim(), static_cast<Eigen::Index>(rects.size()));
  for (std::size_t i = 0; i < rects.size(); ++i) {
    try {
      Eigen::VectorXf f = encode(image, rects[i]);
      require(f.size() == feature_dim(), ErrorCode::ShapeMismatch, "encoder returned wrong feature length");
      out.col(static_cast<Eigen::Index>(i)) = f;
    } catch (const Error& e) {
      fail(ErrorCode::Encoder, std::string(e.what()) + " [crop " + to_string(rects[i]) + " of " + image.id + "]");
    }
  }
  return out;
}

std::vector<int> patch_sizes(const ScaleSpec& spec, int height, int width) {
  require(!spec.divisors.empty(), ErrorCode::InvalidArgument, "patch_sizes: no scales");
  const int s = std::min(height, width);
  std::vector<int> out;
  for (std::size_t i = 0; i < spec.divisors.size(); ++i) {
    const int d = spec.divisors[i];
    require(d > 0, ErrorCode::InvalidArgument, "patch_sizes: divisors must be positive");
    require(i == 0 || d > spec.divisors[i - 1], ErrorCode::InvalidArgument, "patch_sizes: divisors must ascend");
    const int p = s / d;
    require(p >= kMinPatchSize, ErrorCode::InvalidArgument,
            "patch_sizes: patch of " + std::to_string(p) + " px is below the minimum of 8");
    out.push_back(p);
  }
  return out;
}

MultiScaleFeatureMap::MultiScaleFeatureMap(std::string id, std::vector<int> patch, int d, int h, int w)
    : image_id(std::move(id)), scales(std::move(patch)), dim(d), height(h), width(w) {
  data = Eigen::VectorXf::Zero(static_cast<Eigen::Index>(scales.size()) * d * h * w);
}

Eigen::VectorXf MultiScaleFeatureMap::feature(int s, int y, int x) const {
  Eigen::VectorXf f(dim);
  for (int d = 0; d < dim; ++d) f(d) = at(s, d, y, x);
  return f;
}

Eigen::MatrixXf MultiScaleFeatureMap::pixel(int y, int x) const {
  Eigen::MatrixXf f(n_scales(), dim);
  for (int s = 0; s < n_scales(); ++s)
    for (int d = 0; d < dim; ++d) f(s, d) = at(s, d, y, x);
  return f;
}

std::vector<CropRect> plan_windows(int height, int width, int patch, std::mt19937_64& rng, bool jitter) {
  require(patch >= 1 && patch <= std::min(height, width), ErrorCode::InvalidArgument,
          "plan_windows: patch size " + std::to_string(patch) + " exceeds image " + std::to_string(height) + "x" +
              std::to_string(width));
  const int stride = std::max(1, patch / 4);
  auto starts = [&](int extent) {
    std::vector<int> s;
    for (int i = 0; i <= (extent - patch) / stride; ++i) s.push_back(i * stride);
    if ((extent - patch) % stride != 0) s.push_back(extent - patch);
    return s;
  };
  const std::vector<int> rows = starts(height);
  const std::vector<int> cols = starts(width);
  std::uniform_int_distribution<int> draw(0, stride - 1);
  auto randint = [&] { return jitter ? draw(rng) : 0; };
  std::vector<CropRect> rects;
  rects.reserve(rows.size() * cols.size());
  for (int sx : rows) {
    for (int sy : cols) {
      CropRect r;
      r.left = std::max(sy - randint(), 0);
      r.upper = std::max(sx - randint(), 0);
      r.right = std::min(sy + patch + randint(), width);
      r.lower = std::min(sx + patch + randint(), height);
      rects.push_back(r);
    }
  }
  return rects;
}

Eigen::ArrayXXi coverage_count(int height, int width, std::span<const CropRect> rects) {
  Eigen::ArrayXXi count = Eigen::ArrayXXi::Zero(height, width);
  for (const auto& r : rects) count.block(r.upper, r.left, r.height(), r.width()) += 1;
  return count;
}

MultiScaleFeatureMap extract_pixel_features(const Image& image, const ScaleSpec& spec, PatchEncoder& encoder,
                                            std::mt19937_64& rng, const ExtractOptions& options) {
  const int h = image.height(), w = image.width();
  const std::vector<int> sizes = patch_sizes(spec, h, w);
  for (int p : sizes) {
    require(p <= std::min(h, w), ErrorCode::InvalidArgument, "extract_pixel_features: patch larger than image");
  }
  const int dim = encoder.feature_dim();
  MultiScaleFeatureMap map(image.id, sizes, dim, h, w);
  const Eigen::Index plane = static_cast<Eigen::Index>(h) * w;

  for (int s = 0; s < static_cast<int>(sizes.size()); ++s) {
    std::vector<CropRect> rects = plan_windows(h, w, sizes[static_cast<std::size_t>(s)], rng, options.jitter);
    if (options.reverse_visit) std::reverse(rects.begin(), rects.end());
    const Eigen::MatrixXf feats = encoder.encode_batch(image, rects);
    require(feats.rows() == dim && feats.cols() == static_cast<Eigen::Index>(rects.size()), ErrorCode::Encoder,
            "extract_pixel_features: encoder batch has wrong shape");

    // Sums are kept in double: adding n copies of an f32 value is exact there,
    // so a constant encoder reproduces its output bit-for-bit after division.
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(dim, plane);
    Eigen::ArrayXd count = Eigen::ArrayXd::Zero(plane);
    for (std::size_t i = 0; i < rects.size(); ++i) {
      const CropRect& r = rects[i];
      const Eigen::VectorXd f = feats.col(static_cast<Eigen::Index>(i)).cast<double>();
      for (int y = r.upper; y < r.lower; ++y) {
        for (int x = r.left; x < r.right; ++x) {
          const Eigen::Index p = static_cast<Eigen::Index>(y) * w + x;
          sum.col(p) += f;
          count(p) += 1;
        }
      }
    }
    require((count > 0).all(), ErrorCode::Numerical, "extract_pixel_features: uncovered pixel");
    for (int d = 0; d < dim; ++d) {
      float* dst = map.data.data() + map.offset(s, d, 0, 0);
      for (Eigen::Index p = 0; p < plane; ++p) dst[p] = static_cast<float>(sum(d, p) / count(p));
    }
  }
  if (options.half_precision) map.data = map.data.unaryExpr([](float v) { return half_to_float(float_to_half(v)); });
  return map;
}

Eigen::VectorXf select_feature(const MultiScaleFeatureMap& map, int y, int x, const Eigen::VectorXf& selection) {
  if (y < 0 || x < 0 || y >= map.height || x >= map.width) {
    fail(ErrorCode::OutOfRange, "select_feature: pixel (" + std::to_string(x) + ", " + std::to_string(y) +
                                    ") outside " + std::to_string(map.width) + "x" + std::to_string(map.height));
  }
  require(selection.size() == map.n_scales(), ErrorCode::ShapeMismatch, "select_feature: selection length");
  require_prob_vec(selection, "select_feature");
  Eigen::VectorXf out = Eigen::VectorXf::Zero(map.dim);
  for (int s = 0; s < map.n_scales(); ++s) out += selection(s) * map.feature(s, y, x);
  return out;
}

void write_feature_map(const MultiScaleFeatureMap& map, const std::filesystem::path& path, bool half_precision) {
  require(map.data.size() == static_cast<Eigen::Index>(map.n_scales()) * map.dim * map.height * map.width,
          ErrorCode::ShapeMismatch, "write_feature_map: payload size");
  BinaryWriter w;
  w.magic("OVSF");
  w.u32(kFeatureMapVersion);
  w.string(map.image_id);
  w.u32(static_cast<std::uint32_t>(map.n_scales()));
  w.u32(static_cast<std::uint32_t>(map.dim));
  w.u32(static_cast<std::uint32_t>(map.height));
  w.u32(static_cast<std::uint32_t>(map.width));
  w.u8(half_precision ? 1 : 0);
  for (int s : map.scales) w.u32(static_cast<std::uint32_t>(s));
  for (Eigen::Index i = 0; i < map.data.size(); ++i) {
    if (half_precision) {
      w.f16(map.data(i));
    } else {
      w.f32(map.data(i));
    }
  }
  w.save(path);
}

MultiScaleFeatureMap read_feature_map(const std::filesystem::path& path) {
  BinaryReader r = BinaryReader::from_file(path);
  r.expect_magic("OVSF");
  const std::uint32_t version = r.u32();
  if (version != kFeatureMapVersion) {
    fail(ErrorCode::VersionMismatch, "feature map version " + std::to_string(version) + " in " + path.string());
  }
  MultiScaleFeatureMap map;
  map.image_id = r.string();
  const std::uint32_t ns = r.u32();
  map.dim = static_cast<int>(r.u32());
  map.height = static_cast<int>(r.u32());
  map.width = static_cast<int>(r.u32());
  const std::uint8_t dtype = r.u8();
  if (dtype > 1) fail(ErrorCode::Format, "feature map dtype tag " + std::to_string(dtype));
  for (std::uint32_t s = 0; s < ns; ++s) map.scales.push_back(static_cast<int>(r.u32()));
  const std::size_t n = static_cast<std::size_t>(ns) * map.dim * map.height * map.width;
  const std::size_t bytes = n * (dtype == 1 ? 2 : 4);
  if (r.remaining() < bytes) fail(ErrorCode::Truncated, "truncated: feature map payload in " + path.string());
  map.data.resize(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) map.data(static_cast<Eigen::Index>(i)) = dtype == 1 ? r.f16() : r.f32();
  if (!r.at_end()) fail(ErrorCode::Format, "trailing bytes in feature map " + path.string());
  return map;
}

}  // namespace ov3d
