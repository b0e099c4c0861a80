#include "ov3d/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>

namespace ov3d {

using Eigen::MatrixXf;

namespace {

RenderOptions render_options(const LossOptions& o, bool color, bool feature, bool selection) {
  RenderOptions r;
  r.n_samples = o.n_samples;
  r.stratified = o.stratified;
  r.need_color = color;
  r.need_feature = feature;
  r.need_selection = selection;
  return r;
}

/// Supervision (and optionally RDA) on one rendered ray batch.
template <typename Scalar>
LossBreakdown ray_batch_loss(FieldModel<Scalar>& model, const RayTargets<Scalar>& batch, const MatrixX<Scalar>* text,
                             const LossOptions& options, bool with_rda, GroupMask trainable, std::mt19937_64* rng) {
  const Index n = static_cast<Index>(batch.rays.size());
  const bool features = options.feature_term || with_rda;
  if (options.color_term) {
    require(batch.color.rows() == 3 && batch.color.cols() == n, ErrorCode::InvalidArgument,
            "supervision_loss: missing color targets");
  }
  if (options.feature_term) {
    require(static_cast<Index>(batch.clip.size()) == n, ErrorCode::InvalidArgument,
            "supervision_loss: missing feature targets");
  }
  if (with_rda) {
    require(text && batch.relevancy.rows() == text->rows() && batch.relevancy.cols() == n, ErrorCode::InvalidArgument,
            "total_loss: missing relevancy targets");
  }
  RenderBatch<Scalar> render(model, batch.rays,
                             render_options(options, options.color_term, features, options.feature_term),
                             options.stratified ? rng : nullptr);
  LossBreakdown out;
  MatrixX<Scalar> d_color, d_feature, d_selection;
  if (options.color_term) d_color.resize(3, n);
  if (features) d_feature = MatrixX<Scalar>::Zero(model.config().feature_dim, n);
  if (options.feature_term) d_selection.resize(model.config().n_scales, n);

  Scalar sup = 0;
  for (Index r = 0; r < n; ++r) {
    if (options.color_term) {
      const Vector3<Scalar> diff = render.color().col(r) - batch.color.col(r);
      sup += diff.squaredNorm();
      d_color.col(r) = Scalar(2) * diff;
    }
    if (options.feature_term) {
      const MatrixX<Scalar>& clip = batch.clip[static_cast<std::size_t>(r)];
      require(clip.rows() == model.config().n_scales && clip.cols() == model.config().feature_dim,
              ErrorCode::ShapeMismatch, "supervision_loss: feature target shape");
      const VectorX<Scalar> f_hat = render.feature().col(r);
      const VectorX<Scalar> s = render.selection().col(r);
      const VectorX<Scalar> g = clip.transpose() * s;
      sup -= cosine_similarity(f_hat, g, ZeroNorm::Lenient);
      d_feature.col(r) -= cosine_similarity_grad<Scalar>(f_hat, g);
      d_selection.col(r) = -(clip * cosine_similarity_grad<Scalar>(g, f_hat));
    }
  }
  out.supervision = static_cast<double>(sup);

  if (with_rda) {
    MatrixX<Scalar> d_rda;
    const Scalar rda = feature_rda_loss<Scalar>(render.feature(), batch.relevancy, *text, &d_rda);
    out.rda = static_cast<double>(rda);
    d_feature += d_rda;
  }

  if (trainable != 0) {
    render.backward(model, trainable, options.color_term ? &d_color : nullptr, features ? &d_feature : nullptr,
                    options.feature_term ? &d_selection : nullptr);
  }
  return out;
}

}  // namespace

template <typename Scalar>
Scalar feature_rda_loss(const MatrixX<Scalar>& features, const MatrixX<Scalar>& relevancy, const MatrixX<Scalar>& text,
                        MatrixX<Scalar>* d_features) {
  const Index n = features.cols();
  MatrixX<Scalar> probs(text.rows(), n);
  MatrixX<Scalar> logits(text.rows(), n);
  for (Index r = 0; r < n; ++r) {
    logits.col(r) = segmentation_logits<Scalar>(features.col(r), text);
    probs.col(r) = softmax(logits.col(r));
  }
  MatrixX<Scalar> d_probs;
  const Scalar loss = rda_loss<Scalar>(probs, relevancy, d_features ? &d_probs : nullptr);
  if (d_features) {
    d_features->resize(features.rows(), n);
    for (Index r = 0; r < n; ++r) {
      const VectorX<Scalar> dz = softmax_backward<Scalar>(probs.col(r), d_probs.col(r));
      d_features->col(r) = segmentation_logits_backward<Scalar>(features.col(r), text, dz);
    }
  }
  return loss;
}

template <typename Scalar>
Scalar patch_fda_loss(const MatrixX<Scalar>& features, const MatrixX<Scalar>& corr_f, const MatrixX<Scalar>& text,
                      const LossOptions& options, MatrixX<Scalar>* d_features) {
  const Index n = features.cols();
  require(corr_f.rows() == n && corr_f.cols() == n, ErrorCode::ShapeMismatch, "patch_fda_loss: correlation shape");
  const Scalar tau = static_cast<Scalar>(options.tau);
  MatrixX<Scalar> sharp(text.rows(), n);
  for (Index i = 0; i < n; ++i) sharp.col(i) = softmax(segmentation_logits<Scalar>(features.col(i), text), tau);
  const MatrixX<Scalar> corr_d = distribution_correlation<Scalar>(sharp);
  MatrixX<Scalar> d_corr;
  Scalar loss;
  if (options.fda_balanced) {
    loss = fda_loss<Scalar>(corr_f, corr_d, options.fda, d_features ? &d_corr : nullptr);
  } else {
    loss = correlation_loss<Scalar>(corr_f, corr_d, static_cast<Scalar>(options.fda.b), d_features ? &d_corr : nullptr);
  }
  if (d_features) {
    const MatrixX<Scalar> d_sharp = distribution_correlation_backward<Scalar>(sharp, d_corr);
    d_features->resize(features.rows(), n);
    for (Index i = 0; i < n; ++i) {
      const VectorX<Scalar> dz = softmax_backward<Scalar>(sharp.col(i), d_sharp.col(i), tau);
      d_features->col(i) = segmentation_logits_backward<Scalar>(features.col(i), text, dz);
    }
  }
  return loss;
}

template <typename Scalar>
Scalar supervision_loss(FieldModel<Scalar>& model, const RayTargets<Scalar>& batch, const LossOptions& options,
                        GroupMask trainable, std::mt19937_64* rng) {
  return static_cast<Scalar>(ray_batch_loss<Scalar>(model, batch, nullptr, options, false, trainable, rng).supervision);
}

template <typename Scalar>
Scalar photometric_loss(FieldModel<Scalar>& model, std::span<const Ray> rays, const MatrixX<Scalar>& colors,
                        const LossOptions& options, GroupMask trainable, std::mt19937_64* rng) {
  RayTargets<Scalar> batch;
  batch.rays.assign(rays.begin(), rays.end());
  batch.color = colors;
  LossOptions o = options;
  o.color_term = true;
  o.feature_term = false;
  return static_cast<Scalar>(ray_batch_loss<Scalar>(model, batch, nullptr, o, false, trainable, rng).supervision);
}

template <typename Scalar>
LossBreakdown total_loss(FieldModel<Scalar>& model, const RayTargets<Scalar>& batch,
                         std::span<const PatchTargets<Scalar>> patches, const MatrixX<Scalar>& text,
                         const LossOptions& options, GroupMask trainable, std::mt19937_64* rng) {
  LossBreakdown out = ray_batch_loss<Scalar>(model, batch, &text, options, options.use_rda, trainable, rng);
  if (options.use_fda && !patches.empty()) {
    const Scalar scale = Scalar(1) / static_cast<Scalar>(patches.size());
    RenderOptions ro = render_options(options, false, true, false);
    double fda = 0;
    for (const auto& patch : patches) {
      RenderBatch<Scalar> render(model, patch.rays, ro, options.stratified ? rng : nullptr);
      MatrixX<Scalar> d_features;
      const Scalar l = patch_fda_loss<Scalar>(render.feature(), patch.corr_f, text, options,
                                              trainable != 0 ? &d_features : nullptr);
      fda += static_cast<double>(l * scale);
      if (trainable != 0) {
        d_features *= scale;
        render.backward(model, trainable, nullptr, &d_features, nullptr);
      }
    }
    out.fda = fda;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam

template <typename Scalar>
void Adam<Scalar>::update(ParamTensor<Scalar>& tensor, double lr) {
  Moments& mo = moments_[tensor.name];
  if (mo.m.size() != tensor.size()) {
    mo.m = VectorX<Scalar>::Zero(tensor.size());
    mo.v = VectorX<Scalar>::Zero(tensor.size());
    mo.steps = 0;
  }
  ++mo.steps;
  const Scalar b1 = static_cast<Scalar>(beta1_), b2 = static_cast<Scalar>(beta2_);
  mo.m = b1 * mo.m + (Scalar(1) - b1) * tensor.grad;
  mo.v = b2 * mo.v + (Scalar(1) - b2) * tensor.grad.cwiseAbs2();
  const Scalar c1 = static_cast<Scalar>(1.0 - std::pow(beta1_, static_cast<double>(mo.steps)));
  const Scalar c2 = static_cast<Scalar>(1.0 - std::pow(beta2_, static_cast<double>(mo.steps)));
  const Scalar step = static_cast<Scalar>(lr);
  const Scalar eps = static_cast<Scalar>(eps_);
  tensor.value.array() -= step * (mo.m.array() / c1) / ((mo.v.array() / c2).sqrt() + eps);
}

template <typename Scalar>
void Adam<Scalar>::step(FieldModel<Scalar>& model, GroupMask trainable,
                        const std::function<double(ParamGroup)>& lr) {
  auto params = model.parameters(trainable);
  for (auto* p : params) {
    if (!p->grad.allFinite()) fail(ErrorCode::Numerical, "non-finite gradient in " + p->name + "; step aborted");
  }
  for (auto* p : params) update(*p, lr(model.group_of(*p)));
  for (auto* p : params) {
    if (!p->value.allFinite()) fail(ErrorCode::Numerical, "non-finite parameter in " + p->name + " after update");
  }
  model.zero_grad();
}

double lr_schedule(int iteration, int total, double lr0, double decay_target) {
  if (total <= 0) return lr0;
  require(iteration >= 0 && iteration <= total, ErrorCode::OutOfRange, "lr_schedule: iteration outside [0, total]");
  return lr0 * std::pow(decay_target, static_cast<double>(iteration) / total);
}

// ---------------------------------------------------------------------------
// Training stages

std::string to_json_line(const LogRecord& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "{\"stage\": \"%s\", \"iteration\": %d, \"L_supervision\": %.9g, \"L_RDA\": %.9g, \"L_FDA\": %.9g, "
                "\"lr_volume\": %.9g, \"lr_mlp\": %.9g, \"wall_ms\": %.3f}",
                r.stage.c_str(), r.iteration, r.loss.supervision, r.loss.rda, r.loss.fda, r.lr_volume, r.lr_mlp,
                r.wall_ms);
  return buf;
}

TrainState make_train_state(FieldModel<float> model, const TrainConfig& config) {
  TrainState s;
  s.model = std::move(model);
  s.optimizer = Adam<float>(config.betas[0], config.betas[1]);
  s.rng.seed(config.seed);
  return s;
}

namespace {

using Clock = std::chrono::steady_clock;

struct RaySampler {
  const Scene* scene;
  std::vector<int> views;
  int downsample;

  PixelIndex draw(std::mt19937_64& rng, int& view) const {
    std::uniform_int_distribution<std::size_t> pick(0, views.size() - 1);
    view = views[pick(rng)];
    const Camera& c = scene->views[static_cast<std::size_t>(view)].camera;
    std::uniform_int_distribution<int> px(0, downsampled_extent(c.width, downsample) - 1);
    std::uniform_int_distribution<int> py(0, downsampled_extent(c.height, downsample) - 1);
    const int x = px(rng);
    const int y = py(rng);
    return {x, y};
  }
};

// Full-resolution pixel under the centre of a downsampled cell.
int centre_pixel(int cell, int downsample) { return cell * downsample + downsample / 2; }

void emit(TrainState& state, std::ostream* log, LogRecord record) {
  if (log) *log << to_json_line(record) << "\n";
  state.history.push_back(std::move(record));
}

}  // namespace

void train_reconstruction(TrainState& state, const Scene& scene, const TrainConfig& config, std::ostream* log) {
  config.validate();
  const int total = config.recon_iterations;
  RaySampler sampler{&scene, scene.train_indices(), config.ray_downsample};
  require(!sampler.views.empty(), ErrorCode::InvalidArgument, "train_reconstruction: no training views");
  LossOptions options;
  options.n_samples = config.n_samples;
  options.stratified = true;
  state.trainable = kReconstructionGroups;
  MatrixXf colors(3, config.ray_batch);
  std::vector<Ray> rays(static_cast<std::size_t>(config.ray_batch));
  for (int it = 0; it < total; ++it) {
    state.iteration = it;
    const auto start = Clock::now();
    for (int r = 0; r < config.ray_batch; ++r) {
      int v = 0;
      const PixelIndex p = sampler.draw(state.rng, v);
      const View& view = scene.views[static_cast<std::size_t>(v)];
      rays[static_cast<std::size_t>(r)] =
          generate_rays(view.camera, std::span<const PixelIndex>(&p, 1), config.ray_downsample, &scene.bbox)[0];
      colors.col(r) = view.image.pixel(centre_pixel(p.y, config.ray_downsample), centre_pixel(p.x, config.ray_downsample));
    }
    const double lr_v = lr_schedule(it, total, config.recon_lr_volume, config.lr_decay_target);
    const double lr_m = lr_schedule(it, total, config.recon_lr_mlp, config.lr_decay_target);
    LogRecord rec;
    rec.stage = "reconstruction";
    rec.iteration = it;
    rec.loss.supervision =
        static_cast<double>(photometric_loss<float>(state.model, rays, colors, options, state.trainable, &state.rng));
    if (!std::isfinite(rec.loss.supervision)) fail(ErrorCode::Numerical, "reconstruction loss diverged");
    state.optimizer.step(state.model, state.trainable,
                         [&](ParamGroup g) { return g == ParamGroup::RgbHead ? lr_m : lr_v; });
    rec.lr_volume = lr_v;
    rec.lr_mlp = lr_m;
    rec.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
    emit(state, log, rec);
  }
  state.iteration = total;
}

void refresh_relevancy(TrainState& state, const SegmentationInputs& inputs, const TrainConfig& config) {
  const Scene& scene = *inputs.scene;
  if (state.cosines.size() != scene.views.size()) {
    state.cosines.assign(scene.views.size(), {});
    for (std::size_t v = 0; v < scene.views.size(); ++v) {
      if (!inputs.features[v] || scene.is_test(scene.views[v].id)) continue;
      state.cosines[v] = scale_cosines(*inputs.features[v], *inputs.bank, config.ray_downsample);
    }
  }
  state.relevancy.assign(scene.views.size(), {});
  RenderOptions ro;
  ro.n_samples = config.n_samples;
  ro.need_color = false;
  ro.need_feature = false;
  ro.need_selection = true;
  for (std::size_t v = 0; v < scene.views.size(); ++v) {
    if (state.cosines[v].empty()) continue;
    const View& view = scene.views[v];
    const ViewRender<float> render = render_view(state.model, view.camera, config.ray_downsample, ro);
    RelevancyMap map = relevancy_from_cosines(state.cosines[v], render.selection, render.rows, render.cols);
    map.view_id = view.id;
    normalize_relevancy(map);
    state.relevancy[v] = std::move(map);
  }
}

void train_segmentation(TrainState& state, const SegmentationInputs& inputs, const TrainConfig& config,
                        std::ostream* log) {
  config.validate();
  require(inputs.scene && inputs.bank, ErrorCode::InvalidArgument, "train_segmentation: missing scene or text bank");
  const Scene& scene = *inputs.scene;
  require(inputs.features.size() == scene.views.size(), ErrorCode::InvalidArgument,
          "train_segmentation: one feature map slot per view expected");
  const auto& fc = state.model.config();
  std::vector<int> views;
  for (int v : scene.train_indices()) {
    const auto* f = inputs.features[static_cast<std::size_t>(v)];
    if (!f) continue;
    require(f->n_scales() == fc.n_scales && f->dim == fc.feature_dim, ErrorCode::ShapeMismatch,
            "train_segmentation: feature map of " + scene.views[static_cast<std::size_t>(v)].id +
                " does not match the model's feature branch");
    require(f->height == scene.views[static_cast<std::size_t>(v)].image.height() &&
                f->width == scene.views[static_cast<std::size_t>(v)].image.width(),
            ErrorCode::ShapeMismatch, "train_segmentation: feature map size differs from image");
    views.push_back(v);
  }
  require(!views.empty(), ErrorCode::InvalidArgument, "train_segmentation: no training view has features");
  require(inputs.bank->dim() == fc.feature_dim, ErrorCode::ShapeMismatch,
          "train_segmentation: text bank dimension differs from feature dimension");
  std::vector<int> dino_views;
  if (config.use_fda) {
    require(inputs.dino.size() == scene.views.size(), ErrorCode::InvalidArgument,
            "train_segmentation: one dino slot per view expected");
    for (int v : views)
      if (inputs.dino[static_cast<std::size_t>(v)]) dino_views.push_back(v);
    require(!dino_views.empty() || config.patch_batch == 0, ErrorCode::InvalidArgument,
            "train_segmentation: FDA enabled but no dino maps");
  }

  const MatrixXf text = inputs.bank->features;
  const int total = config.phase_a_iterations + config.phase_b_iterations;
  RaySampler sampler{&scene, views, config.ray_downsample};
  LossOptions options;
  options.n_samples = config.n_samples;
  options.stratified = true;
  options.use_rda = config.use_rda;
  options.use_fda = config.use_fda;
  options.fda_balanced = config.fda_balanced;
  options.tau = config.tau;
  options.fda.b = config.b;
  options.fda.lambda_pos = config.lambda_pos;
  options.fda.lambda_neg = config.lambda_neg;

  RayTargets<float> batch;
  batch.rays.resize(static_cast<std::size_t>(config.ray_batch));
  batch.color.resize(3, config.ray_batch);
  batch.clip.resize(static_cast<std::size_t>(config.ray_batch));
  if (config.use_rda) batch.relevancy.resize(inputs.bank->classes(), config.ray_batch);
  std::vector<PatchTargets<float>> patches;

  for (int it = 0; it < total; ++it) {
    state.iteration = it;
    const auto start = Clock::now();
    const bool phase_a = it < config.phase_a_iterations;
    state.trainable = phase_a ? kPhaseAGroups : kPhaseBGroups;
    if (config.use_rda && it % config.relevancy_refresh == 0) refresh_relevancy(state, inputs, config);

    for (int r = 0; r < config.ray_batch; ++r) {
      int v = 0;
      const PixelIndex p = sampler.draw(state.rng, v);
      const View& view = scene.views[static_cast<std::size_t>(v)];
      const int py = centre_pixel(p.y, config.ray_downsample), px = centre_pixel(p.x, config.ray_downsample);
      batch.rays[static_cast<std::size_t>(r)] =
          generate_rays(view.camera, std::span<const PixelIndex>(&p, 1), config.ray_downsample, &scene.bbox)[0];
      batch.color.col(r) = view.image.pixel(py, px);
      batch.clip[static_cast<std::size_t>(r)] = inputs.features[static_cast<std::size_t>(v)]->pixel(py, px);
      if (config.use_rda) {
        const RelevancyMap& rel = state.relevancy[static_cast<std::size_t>(v)];
        batch.relevancy.col(r) = rel.normalized.col(static_cast<Index>(p.y) * rel.width + p.x);
      }
    }

    patches.clear();
    if (config.use_fda) {
      for (int k = 0; k < config.patch_batch; ++k) {
        std::uniform_int_distribution<std::size_t> pick(0, dino_views.size() - 1);
        const int v = dino_views[pick(state.rng)];
        const View& view = scene.views[static_cast<std::size_t>(v)];
        const DinoMap& dino = *inputs.dino[static_cast<std::size_t>(v)];
        const int cells = std::max(2, config.patch_size / dino.stride);
        require(cells <= dino.height && cells <= dino.width, ErrorCode::InvalidArgument,
                "train_segmentation: patch larger than the dino map of " + view.id);
        const int max_step = std::min((dino.height - 1) / (cells - 1), (dino.width - 1) / (cells - 1));
        const int step = std::max(1, std::min(config.patch_downsample, max_step));
        const int span = (cells - 1) * step + 1;
        std::uniform_int_distribution<int> oy(0, dino.height - span), ox(0, dino.width - span);
        const int y0 = oy(state.rng), x0 = ox(state.rng);
        PatchTargets<float> patch;
        MatrixXf cell_features(dino.dim, cells * cells);
        for (int i = 0; i < cells; ++i) {
          for (int j = 0; j < cells; ++j) {
            const int cy = y0 + i * step, cx = x0 + j * step;
            cell_features.col(i * cells + j) = dino.cell(cy, cx);
            patch.rays.push_back(
                camera_ray(view.camera, (cx + 0.5) * dino.stride, (cy + 0.5) * dino.stride, &scene.bbox));
          }
        }
        patch.corr_f = feature_correlation<float>(cell_features);
        patches.push_back(std::move(patch));
      }
    }

    const double lr_v = lr_schedule(it, total, config.lr_volume, config.lr_decay_target);
    const double lr_m = lr_schedule(it, total, config.lr_mlp, config.lr_decay_target);
    const double lr_v_ft = lr_schedule(it, total, config.lr_volume_ft, config.lr_decay_target);
    const double lr_m_ft = lr_schedule(it, total, config.lr_mlp_ft, config.lr_decay_target);
    LogRecord rec;
    rec.stage = phase_a ? "segmentation_a" : "segmentation_b";
    rec.iteration = it;
    rec.loss = total_loss<float>(state.model, batch, patches, text, options, state.trainable, &state.rng);
    if (!std::isfinite(rec.loss.total())) fail(ErrorCode::Numerical, "segmentation loss diverged");
    state.optimizer.step(state.model, state.trainable, [&](ParamGroup g) {
      switch (g) {
        case ParamGroup::Selection: return lr_v;
        case ParamGroup::FeatureHead: return lr_m;
        case ParamGroup::Shared: return lr_v_ft;
        case ParamGroup::RgbHead: return lr_m_ft;
        default: return 0.0;
      }
    });
    rec.lr_volume = lr_v;
    rec.lr_mlp = lr_m;
    rec.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
    emit(state, log, rec);
  }
  state.iteration = total;
}

#define OV3D_INSTANTIATE(S)                                                                                    \
  template S supervision_loss(FieldModel<S>&, const RayTargets<S>&, const LossOptions&, GroupMask,             \
                              std::mt19937_64*);                                                               \
  template S photometric_loss(FieldModel<S>&, std::span<const Ray>, const MatrixX<S>&, const LossOptions&,     \
                              GroupMask, std::mt19937_64*);                                                    \
  template LossBreakdown total_loss(FieldModel<S>&, const RayTargets<S>&, std::span<const PatchTargets<S>>,    \
                                    const MatrixX<S>&, const LossOptions&, GroupMask, std::mt19937_64*);       \
  template S patch_fda_loss(const MatrixX<S>&, const MatrixX<S>&, const MatrixX<S>&, const LossOptions&,       \
                            MatrixX<S>*);                                                                      \
  template S feature_rda_loss(const MatrixX<S>&, const MatrixX<S>&, const MatrixX<S>&, MatrixX<S>*);           \
  template class Adam<S>;

OV3D_INSTANTIATE(float)
OV3D_INSTANTIATE(double)
#undef OV3D_INSTANTIATE

}  // namespace ov3d
