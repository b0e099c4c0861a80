#pragma once

#include <Eigen/Core>

#include <optional>
#include <random>
#include <span>
#include <vector>

#include "ov3d/field.hpp"

namespace ov3d {

/// Pinhole camera. `c2w` maps camera coordinates (x right, y up, looking
/// down -z) to world coordinates. Intrinsics are in full-resolution pixels.
struct Camera {
  Eigen::Matrix<double, 3, 4> c2w = Eigen::Matrix<double, 3, 4>::Identity();
  int height = 0;
  int width = 0;
  double focal = 1;
  double near = 0;
  double far = 1;

  Eigen::Vector3d center() const { return c2w.col(3); }
};

struct Ray {
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  Eigen::Vector3d direction = -Eigen::Vector3d::UnitZ();
  double near = 0;
  double far = 1;
};

struct PixelIndex {
  int x = 0;  // column in the downsampled grid
  int y = 0;  // row in the downsampled grid
};

/// Ray through continuous full-resolution pixel coordinates (px, py), with
/// (0, 0) the top-left corner of the image. When `clip` is given and the ray
/// meets the box, [near, far] is narrowed to the overlap.
Ray camera_ray(const Camera& camera, double px, double py, const Aabb* clip = nullptr);

/// Rays through the centres of the requested cells of the image downsampled
/// by `downsample`.
std::vector<Ray> generate_rays(const Camera& camera, std::span<const PixelIndex> pixels, int downsample,
                               const Aabb* clip = nullptr);

/// Every cell of the downsampled grid, row-major.
std::vector<Ray> generate_view_rays(const Camera& camera, int downsample, const Aabb* clip = nullptr);

inline int downsampled_extent(int full, int downsample) { return full / downsample; }

struct RaySamples {
  Eigen::VectorXd t;
  Eigen::VectorXd delta;
};

/// n equal bins over [near, far]; each sample sits at its bin centre (or at a
/// uniform position inside the bin when stratified) and owns the bin width.
RaySamples sample_points(const Ray& ray, int n_samples, bool stratified = false, std::mt19937_64* rng = nullptr);

template <typename Scalar>
struct RenderOutput {
  Vector3<Scalar> color = Vector3<Scalar>::Zero();
  VectorX<Scalar> feature;
  VectorX<Scalar> selection;
  VectorX<Scalar> weights;
  Scalar transmittance_tail = 1;
};

struct RenderOptions {
  int n_samples = 128;
  bool stratified = false;
  bool need_color = true;
  bool need_feature = true;
  bool need_selection = true;
};

/// Forward volume rendering of a batch of rays with everything retained for
/// the reverse pass. Outputs are column-per-ray matrices.
template <typename Scalar>
class RenderBatch {
 public:
  RenderBatch(const FieldModel<Scalar>& model, std::span<const Ray> rays, const RenderOptions& options,
              std::mt19937_64* rng = nullptr);

  Index ray_count() const { return rays_; }
  const MatrixX<Scalar>& color() const { return color_; }
  const MatrixX<Scalar>& feature() const { return feature_; }
  const MatrixX<Scalar>& selection() const { return selection_; }
  const MatrixX<Scalar>& weights() const { return weights_; }
  const VectorX<Scalar>& transmittance_tail() const { return tail_; }
  /// Transmittance before each sample, (n_samples + 1) x rays.
  const MatrixX<Scalar>& transmittance() const { return trans_; }

  RenderOutput<Scalar> output(Index ray) const;

  /// Accumulates parameter gradients of the groups in `trainable` given the
  /// upstream gradients of color, feature and selection (any may be null).
  void backward(FieldModel<Scalar>& model, GroupMask trainable, const MatrixX<Scalar>* d_color,
                const MatrixX<Scalar>* d_feature, const MatrixX<Scalar>* d_selection) const;

 private:
  const FieldModel<Scalar>* model_;
  RenderOptions options_;
  Index rays_ = 0;
  int n_ = 0;
  std::vector<TrilinearStencil<Scalar>> stencils_;
  std::vector<Index> compact_;  // sample -> column among inside samples, or -1
  std::vector<Index> inside_;   // inside sample ids
  VectorX<Scalar> raw_density_;
  VectorX<Scalar> delta_;
  MatrixX<Scalar> weights_;
  MatrixX<Scalar> trans_;
  VectorX<Scalar> tail_;
  MatrixX<Scalar> sample_selection_;  // N_s x samples
  MatrixX<Scalar> sample_color_;      // 3 x inside
  MatrixX<Scalar> sample_feature_;    // D x inside
  mutable typename Mlp<Scalar>::Cache rgb_cache_;
  mutable typename Mlp<Scalar>::Cache feature_cache_;
  MatrixX<Scalar> color_, feature_, selection_acc_, selection_;
};

template <typename Scalar>
RenderOutput<Scalar> render_ray(const FieldModel<Scalar>& model, const Ray& ray, int n_samples);

template <typename Scalar>
struct ViewRender {
  int rows = 0;
  int cols = 0;
  MatrixX<Scalar> color;      // 3 x pixels
  MatrixX<Scalar> feature;    // D x pixels
  MatrixX<Scalar> selection;  // N_s x pixels
  MatrixX<Scalar> weights;    // n_samples x pixels
  VectorX<Scalar> transmittance_tail;

  RenderOutput<Scalar> output(Index pixel) const;
};

/// Renders every cell of the downsampled view grid in deterministic sampling
/// mode, in chunks of `chunk` rays.
template <typename Scalar>
ViewRender<Scalar> render_view(const FieldModel<Scalar>& model, const Camera& camera, int downsample,
                               const RenderOptions& options, Index chunk = 2048);

}  // namespace ov3d
