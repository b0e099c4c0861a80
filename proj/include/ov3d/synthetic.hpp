#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ov3d/dataset.hpp"
#include "ov3d/fda.hpp"
#include "ov3d/patchfeat.hpp"
#include "ov3d/relevancy.hpp"

namespace ov3d {

struct SyntheticObject {
  enum class Shape { Sphere, Box };
  std::string label;
  Shape shape = Shape::Sphere;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d size = Eigen::Vector3d::Constant(0.5);  // radius in x for spheres, half extents for boxes
  Eigen::Vector3d color = Eigen::Vector3d::Constant(0.5);
};

/// A forward-facing scene: a background plane (class 0) with lambertian
/// objects in front of it (classes 1..), seen from cameras on an ellipse.
struct SyntheticSpec {
  int image_size = 64;
  int views = 8;
  std::vector<int> held_out{3, 7};
  double fov_degrees = 45;
  Eigen::Vector2d camera_radius{0.5, 0.3};
  Eigen::Vector3d look_at{0, 0, -3};
  std::string background_label = "background";
  Eigen::Vector3d background_color{0.55, 0.55, 0.6};
  double background_depth = -4.0;
  double checker_size = 0.4;  // background texture period
  std::vector<SyntheticObject> objects;
  Aabb bbox;
  int feature_dim = 16;
  double noise_sigma = 0.1;  // pseudo-CLIP noise
  double dino_noise = 0.05;
  int dino_stride = 4;
  double max_prototype_cosine = 0.9;
  std::uint64_t seed = 0;

  /// Default layout: a red ball and a green box.
  static SyntheticSpec standard();
  int classes() const { return 1 + static_cast<int>(objects.size()); }
  std::vector<std::string> labels() const;
};

std::string spec_to_json(const SyntheticSpec& spec);
SyntheticSpec spec_from_json(const std::string& text);

/// Class prototypes (C x D), pairwise cosine below the spec bound.
Eigen::MatrixXf synthetic_prototypes(const SyntheticSpec& spec);

/// Pseudo-CLIP: the area-weighted mix of class prototypes inside the crop
/// (from the view's ground-truth mask) plus seeded gaussian noise.
class SyntheticClipEncoder : public PatchEncoder {
 public:
  SyntheticClipEncoder(Eigen::MatrixXf prototypes, std::map<std::string, LabelMap> masks, double noise_sigma,
                       std::uint64_t seed);
  int feature_dim() const override { return static_cast<int>(prototypes_.cols()); }
  Eigen::VectorXf encode(const Image& image, const CropRect& rect) override;

 private:
  Eigen::MatrixXf prototypes_;
  std::map<std::string, LabelMap> masks_;
  double sigma_;
  std::uint64_t seed_;
};

/// Pseudo-DINO: one-hot ground-truth class of each cell centre plus noise.
DinoMap synthetic_dino(const LabelMap& mask, int classes, int stride, double noise, std::uint64_t seed,
                       const std::string& view_id);

struct SyntheticScene {
  SyntheticSpec spec;
  Scene scene;  // every view carries its ground-truth mask
  Eigen::MatrixXf prototypes;
  TextFeatureBank bank;
  std::vector<DinoMap> dino;

  SyntheticClipEncoder encoder() const;
};

SyntheticScene make_synthetic_scene(const SyntheticSpec& spec);

/// Ground-truth class under a ray (255 never occurs: the plane fills the view).
int synthetic_class_at(const SyntheticSpec& spec, const Ray& ray, Eigen::Vector3d* color = nullptr);

/// Writes the scene in LLFF layout plus masks/, dino/, textbank.ovtb and
/// synthetic.json.
void write_synthetic_scene(const SyntheticScene& scene, const std::filesystem::path& dir);

/// Stable 64-bit hash (FNV-1a) used to seed per-crop noise.
std::uint64_t stable_hash(const std::string& text, std::uint64_t seed = 0);

}  // namespace ov3d
