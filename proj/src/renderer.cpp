#include "ov3d/renderer.hpp"

#include <Eigen/LU>

#include <cmath>

namespace ov3d {

Ray camera_ray(const Camera& camera, double px, double py, const Aabb* clip) {
  const Eigen::Matrix3d rot = camera.c2w.leftCols<3>();
  if (!rot.allFinite() || std::abs(rot.determinant()) < 1e-8) {
    fail(ErrorCode::InvalidArgument, "camera_ray: pose is not invertible");
  }
  require(camera.focal > 0, ErrorCode::InvalidArgument, "camera_ray: focal must be positive");
  const Eigen::Vector3d d_cam((px - 0.5 * camera.width) / camera.focal, -(py - 0.5 * camera.height) / camera.focal,
                              -1.0);
  Ray ray;
  ray.origin = camera.c2w.col(3);
  ray.direction = (rot * d_cam).normalized();
  ray.near = camera.near;
  ray.far = camera.far;
  if (clip) {
    double t0 = ray.near, t1 = ray.far;
    for (int a = 0; a < 3; ++a) {
      const double d = ray.direction(a);
      const double o = ray.origin(a);
      if (std::abs(d) < 1e-12) {
        if (o < clip->lo(a) || o > clip->hi(a)) {
          t1 = t0 - 1;
          break;
        }
        continue;
      }
      double ta = (clip->lo(a) - o) / d;
      double tb = (clip->hi(a) - o) / d;
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
    }
    if (t0 < t1) {
      ray.near = t0;
      ray.far = t1;
    }
  }
  return ray;
}

std::vector<Ray> generate_rays(const Camera& camera, std::span<const PixelIndex> pixels, int downsample,
                               const Aabb* clip) {
  require(downsample >= 1, ErrorCode::InvalidArgument, "generate_rays: downsample must be >= 1");
  const int rows = downsampled_extent(camera.height, downsample);
  const int cols = downsampled_extent(camera.width, downsample);
  std::vector<Ray> rays;
  rays.reserve(pixels.size());
  for (const auto& p : pixels) {
    if (p.x < 0 || p.y < 0 || p.x >= cols || p.y >= rows) {
      fail(ErrorCode::OutOfRange, "generate_rays: pixel outside downsampled grid");
    }
    const double px = p.x * downsample + 0.5 * downsample;
    const double py = p.y * downsample + 0.5 * downsample;
    rays.push_back(camera_ray(camera, px, py, clip));
  }
  return rays;
}

std::vector<Ray> generate_view_rays(const Camera& camera, int downsample, const Aabb* clip) {
  require(downsample >= 1, ErrorCode::InvalidArgument, "generate_view_rays: downsample must be >= 1");
  const int rows = downsampled_extent(camera.height, downsample);
  const int cols = downsampled_extent(camera.width, downsample);
  std::vector<PixelIndex> pixels;
  pixels.reserve(static_cast<std::size_t>(rows) * cols);
  for (int y = 0; y < rows; ++y)
    for (int x = 0; x < cols; ++x) pixels.push_back({x, y});
  return generate_rays(camera, pixels, downsample, clip);
}

RaySamples sample_points(const Ray& ray, int n_samples, bool stratified, std::mt19937_64* rng) {
  require(n_samples >= 1, ErrorCode::InvalidArgument, "sample_points: n_samples must be >= 1");
  require(!stratified || rng, ErrorCode::InvalidArgument, "sample_points: stratified sampling needs an rng");
  RaySamples s;
  s.t.resize(n_samples);
  s.delta.resize(n_samples);
  const double width = (ray.far - ray.near) / n_samples;
  std::uniform_real_distribution<double> jitter(0.0, 1.0);
  for (int i = 0; i < n_samples; ++i) {
    const double u = stratified ? jitter(*rng) : 0.5;
    s.t(i) = ray.near + (i + u) * width;
    s.delta(i) = width;
  }
  return s;
}

// ---------------------------------------------------------------------------
// RenderBatch

template <typename Scalar>
RenderBatch<Scalar>::RenderBatch(const FieldModel<Scalar>& model, std::span<const Ray> rays,
                                 const RenderOptions& options, std::mt19937_64* rng)
    : model_(&model), options_(options), rays_(static_cast<Index>(rays.size())), n_(options.n_samples) {
  const auto& cfg = model.config();
  const Index total = rays_ * n_;
  const int k_app = cfg.appearance_channels;
  const int n_scales = cfg.n_scales;

  stencils_.resize(static_cast<std::size_t>(total));
  compact_.assign(static_cast<std::size_t>(total), -1);
  inside_.clear();
  raw_density_ = VectorX<Scalar>::Zero(total);
  delta_.resize(total);
  sample_selection_ = MatrixX<Scalar>::Zero(n_scales, options.need_selection ? total : 0);
  std::vector<Eigen::Vector3d> sample_dirs;

  for (Index r = 0; r < rays_; ++r) {
    const Ray& ray = rays[static_cast<std::size_t>(r)];
    const RaySamples samples = sample_points(ray, n_, options.stratified, rng);
    for (int i = 0; i < n_; ++i) {
      const Index s = r * n_ + i;
      const Eigen::Vector3d pos = ray.origin + samples.t(i) * ray.direction;
      auto& st = stencils_[static_cast<std::size_t>(s)];
      st = model.stencil(pos);
      delta_(s) = static_cast<Scalar>(samples.delta(i));
      if (!st.inside) continue;
      compact_[static_cast<std::size_t>(s)] = static_cast<Index>(inside_.size());
      inside_.push_back(s);
      model.interpolate(model.density, 1, st, &raw_density_(s));
      if (options.need_selection) model.interpolate(model.selection, n_scales, st, sample_selection_.col(s).data());
    }
  }

  // Transmittance and weights.
  weights_ = MatrixX<Scalar>::Zero(n_, rays_);
  trans_.resize(n_ + 1, rays_);
  tail_.resize(rays_);
  for (Index r = 0; r < rays_; ++r) {
    Scalar t = 1;
    for (int i = 0; i < n_; ++i) {
      const Index s = r * n_ + i;
      trans_(i, r) = t;
      if (compact_[static_cast<std::size_t>(s)] < 0) continue;
      using std::exp;
      const Scalar sigma = softplus(raw_density_(s));
      const Scalar keep = exp(-delta_(s) * sigma);
      weights_(i, r) = t * (Scalar(1) - keep);
      t *= keep;
    }
    trans_(n_, r) = t;
    tail_(r) = t;
  }

  // Heads on inside samples.
  const Index m = static_cast<Index>(inside_.size());
  MatrixX<Scalar> app;
  if (options.need_color || options.need_feature) {
    app.resize(k_app, m);
    for (Index j = 0; j < m; ++j)
      model.interpolate(model.shared, k_app, stencils_[static_cast<std::size_t>(inside_[j])], app.col(j).data());
  }
  if (options.need_color) {
    const int dir_dim = encoded_direction_dim(cfg.view_frequencies);
    MatrixX<Scalar> in(k_app + dir_dim, m);
    in.topRows(k_app) = app;
    Index last_ray = -1;
    VectorX<Scalar> enc;
    for (Index j = 0; j < m; ++j) {
      const Index r = inside_[j] / n_;
      if (r != last_ray) {
        enc = encode_direction<Scalar>(rays[static_cast<std::size_t>(r)].direction, cfg.view_frequencies);
        last_ray = r;
      }
      in.col(j).tail(dir_dim) = enc;
    }
    sample_color_ = model.rgb_head.forward(in, &rgb_cache_);
    sample_color_ = sample_color_.unaryExpr([](Scalar x) { return sigmoid(x); });
  }
  if (options.need_feature) sample_feature_ = model.feature_head.forward(app, &feature_cache_);

  // Composite.
  color_ = MatrixX<Scalar>::Zero(3, options.need_color ? rays_ : 0);
  feature_ = MatrixX<Scalar>::Zero(cfg.feature_dim, options.need_feature ? rays_ : 0);
  selection_acc_ = MatrixX<Scalar>::Zero(n_scales, options.need_selection ? rays_ : 0);
  selection_.resize(n_scales, options.need_selection ? rays_ : 0);
  for (Index r = 0; r < rays_; ++r) {
    for (int i = 0; i < n_; ++i) {
      const Index s = r * n_ + i;
      const Index j = compact_[static_cast<std::size_t>(s)];
      if (j < 0) continue;
      const Scalar w = weights_(i, r);
      if (options.need_color) color_.col(r) += w * sample_color_.col(j);
      if (options.need_feature) feature_.col(r) += w * sample_feature_.col(j);
      if (options.need_selection) selection_acc_.col(r) += w * sample_selection_.col(s);
    }
    if (options.need_selection) selection_.col(r) = softmax(selection_acc_.col(r));
  }
}

template <typename Scalar>
RenderOutput<Scalar> RenderBatch<Scalar>::output(Index ray) const {
  RenderOutput<Scalar> out;
  if (options_.need_color) out.color = color_.col(ray);
  if (options_.need_feature) out.feature = feature_.col(ray);
  if (options_.need_selection) out.selection = selection_.col(ray);
  out.weights = weights_.col(ray);
  out.transmittance_tail = tail_(ray);
  return out;
}

template <typename Scalar>
void RenderBatch<Scalar>::backward(FieldModel<Scalar>& model, GroupMask trainable, const MatrixX<Scalar>* d_color,
                                   const MatrixX<Scalar>* d_feature, const MatrixX<Scalar>* d_selection) const {
  require(&model == model_, ErrorCode::InvalidArgument, "RenderBatch::backward: model differs from forward pass");
  require(!d_color || options_.need_color, ErrorCode::InvalidArgument, "backward: color was not rendered");
  require(!d_feature || options_.need_feature, ErrorCode::InvalidArgument, "backward: feature was not rendered");
  require(!d_selection || options_.need_selection, ErrorCode::InvalidArgument, "backward: selection was not rendered");
  const auto& cfg = model.config();
  const int k_app = cfg.appearance_channels;
  const int n_scales = cfg.n_scales;
  const Index m = static_cast<Index>(inside_.size());

  MatrixX<Scalar> d_acc;
  if (d_selection) {
    d_acc.resize(n_scales, rays_);
    for (Index r = 0; r < rays_; ++r)
      d_acc.col(r) = softmax_backward<Scalar>(selection_.col(r), d_selection->col(r));
  }

  // Density: dL/dsigma_k = delta_k (T_{k+1} g_k - sum_{i>k} w_i g_i).
  if (has_group(trainable, ParamGroup::Density)) {
    for (Index r = 0; r < rays_; ++r) {
      VectorX<Scalar> g = VectorX<Scalar>::Zero(n_);
      for (int i = 0; i < n_; ++i) {
        const Index s = r * n_ + i;
        const Index j = compact_[static_cast<std::size_t>(s)];
        if (j < 0) continue;
        if (d_color) g(i) += d_color->col(r).dot(sample_color_.col(j));
        if (d_feature) g(i) += d_feature->col(r).dot(sample_feature_.col(j));
        if (d_selection) g(i) += d_acc.col(r).dot(sample_selection_.col(s));
      }
      Scalar suffix = 0;
      for (int i = n_ - 1; i >= 0; --i) {
        const Index s = r * n_ + i;
        if (compact_[static_cast<std::size_t>(s)] >= 0) {
          const Scalar d_sigma = delta_(s) * (trans_(i + 1, r) * g(i) - suffix);
          const Scalar d_raw = d_sigma * sigmoid(raw_density_(s));
          model.scatter_grad(model.density, 1, stencils_[static_cast<std::size_t>(s)], &d_raw);
        }
        suffix += weights_(i, r) * g(i);
      }
    }
  }

  if (d_selection && has_group(trainable, ParamGroup::Selection)) {
    VectorX<Scalar> d(n_scales);
    for (Index r = 0; r < rays_; ++r) {
      for (int i = 0; i < n_; ++i) {
        const Index s = r * n_ + i;
        if (compact_[static_cast<std::size_t>(s)] < 0) continue;
        d = weights_(i, r) * d_acc.col(r);
        model.scatter_grad(model.selection, n_scales, stencils_[static_cast<std::size_t>(s)], d.data());
      }
    }
  }

  const bool want_shared = has_group(trainable, ParamGroup::Shared);
  MatrixX<Scalar> d_app;
  if (want_shared) d_app = MatrixX<Scalar>::Zero(k_app, m);

  if (d_color && (want_shared || has_group(trainable, ParamGroup::RgbHead))) {
    MatrixX<Scalar> d_pre(3, m);
    for (Index j = 0; j < m; ++j) {
      const Index s = inside_[j];
      const Index r = s / n_;
      const Scalar w = weights_(s % n_, r);
      const auto c = sample_color_.col(j).array();
      d_pre.col(j) = (w * d_color->col(r).array() * c * (Scalar(1) - c)).matrix();
    }
    MatrixX<Scalar> d_in =
        model.rgb_head.backward(rgb_cache_, d_pre, has_group(trainable, ParamGroup::RgbHead), want_shared);
    if (want_shared) d_app += d_in.topRows(k_app);
  }

  if (d_feature && (want_shared || has_group(trainable, ParamGroup::FeatureHead))) {
    MatrixX<Scalar> d_out(cfg.feature_dim, m);
    for (Index j = 0; j < m; ++j) {
      const Index s = inside_[j];
      const Index r = s / n_;
      d_out.col(j) = weights_(s % n_, r) * d_feature->col(r);
    }
    MatrixX<Scalar> d_in =
        model.feature_head.backward(feature_cache_, d_out, has_group(trainable, ParamGroup::FeatureHead), want_shared);
    if (want_shared) d_app += d_in;
  }

  if (want_shared) {
    for (Index j = 0; j < m; ++j)
      model.scatter_grad(model.shared, k_app, stencils_[static_cast<std::size_t>(inside_[j])], d_app.col(j).data());
  }
}

template <typename Scalar>
RenderOutput<Scalar> render_ray(const FieldModel<Scalar>& model, const Ray& ray, int n_samples) {
  RenderOptions options;
  options.n_samples = n_samples;
  RenderBatch<Scalar> batch(model, std::span<const Ray>(&ray, 1), options);
  return batch.output(0);
}

template <typename Scalar>
RenderOutput<Scalar> ViewRender<Scalar>::output(Index pixel) const {
  RenderOutput<Scalar> out;
  if (color.cols() > 0) out.color = color.col(pixel);
  if (feature.cols() > 0) out.feature = feature.col(pixel);
  if (selection.cols() > 0) out.selection = selection.col(pixel);
  out.weights = weights.col(pixel);
  out.transmittance_tail = transmittance_tail(pixel);
  return out;
}

template <typename Scalar>
ViewRender<Scalar> render_view(const FieldModel<Scalar>& model, const Camera& camera, int downsample,
                               const RenderOptions& options, Index chunk) {
  require(!options.stratified, ErrorCode::InvalidArgument, "render_view: deterministic sampling only");
  const auto rays = generate_view_rays(camera, downsample, &model.config().bbox);
  ViewRender<Scalar> view;
  view.rows = downsampled_extent(camera.height, downsample);
  view.cols = downsampled_extent(camera.width, downsample);
  const Index total = static_cast<Index>(rays.size());
  view.color.resize(3, options.need_color ? total : 0);
  view.feature.resize(model.config().feature_dim, options.need_feature ? total : 0);
  view.selection.resize(model.config().n_scales, options.need_selection ? total : 0);
  view.weights.resize(options.n_samples, total);
  view.transmittance_tail.resize(total);
  for (Index start = 0; start < total; start += chunk) {
    const Index count = std::min(chunk, total - start);
    RenderBatch<Scalar> batch(model, std::span<const Ray>(rays.data() + start, static_cast<std::size_t>(count)),
                              options);
    if (options.need_color) view.color.middleCols(start, count) = batch.color();
    if (options.need_feature) view.feature.middleCols(start, count) = batch.feature();
    if (options.need_selection) view.selection.middleCols(start, count) = batch.selection();
    view.weights.middleCols(start, count) = batch.weights();
    view.transmittance_tail.segment(start, count) = batch.transmittance_tail();
  }
  return view;
}

template class RenderBatch<float>;
template class RenderBatch<double>;
template struct ViewRender<float>;
template struct ViewRender<double>;
template RenderOutput<float> render_ray(const FieldModel<float>&, const Ray&, int);
template RenderOutput<double> render_ray(const FieldModel<double>&, const Ray&, int);
template ViewRender<float> render_view(const FieldModel<float>&, const Camera&, int, const RenderOptions&, Index);
template ViewRender<double> render_view(const FieldModel<double>&, const Camera&, int, const RenderOptions&, Index);

}  // namespace ov3d
