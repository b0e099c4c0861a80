#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ov3d/field.hpp"
#include "ov3d/image.hpp"
#include "ov3d/renderer.hpp"

namespace ov3d {

struct View {
  std::string id;
  Image image;
  Camera camera;
  std::optional<LabelMap> mask;  // class per pixel, kUnlabeled for unknown
};

struct Scene {
  std::vector<View> views;
  Aabb bbox;
  std::vector<std::string> labels;
  std::vector<std::string> test_views;  // held out from training

  int index_of(const std::string& view_id) const;  // -1 when absent
  bool is_test(const std::string& view_id) const;
  std::vector<int> train_indices() const;
  std::vector<int> test_indices() const;
};

struct LlffOptions {
  int downsample = 1;
  double bbox_margin = 0.1;
};

/// One 17-value poses_bounds row: 3x5 [down, right, back, position, hwf]
/// followed by near and far.
Camera camera_from_llff(const double* row);
std::array<double, 17> llff_from_camera(const Camera& camera);

/// Box around the camera centres and the near/far frustum corners, grown by
/// `margin` times its extent on every side.
Aabb bbox_from_cameras(const std::vector<View>& views, double margin);

/// Directory layout: images/ (PNG or JPEG, sorted by name), poses_bounds.npy,
/// and an optional scene.json with labels, test_views and bbox.
Scene load_llff(const std::filesystem::path& dir, const LlffOptions& options = {});
void write_llff(const Scene& scene, const std::filesystem::path& dir);

/// Attaches masks/<view_id>.png for every view that has one.
void load_masks(const std::filesystem::path& dir, Scene& scene);
void write_masks(const Scene& scene, const std::filesystem::path& dir);

}  // namespace ov3d
