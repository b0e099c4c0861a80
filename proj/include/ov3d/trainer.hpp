#pragma once

#include <Eigen/Core>

#include <functional>
#include <map>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ov3d/config.hpp"
#include "ov3d/dataset.hpp"
#include "ov3d/fda.hpp"
#include "ov3d/field.hpp"
#include "ov3d/patchfeat.hpp"
#include "ov3d/relevancy.hpp"
#include "ov3d/renderer.hpp"

namespace ov3d {

// ---------------------------------------------------------------------------
// Losses on explicit batches

/// Rays with their targets. `clip` holds one N_s x D matrix per ray;
/// `relevancy` is C x rays (empty when RDA is off).
template <typename Scalar>
struct RayTargets {
  std::vector<Ray> rays;
  MatrixX<Scalar> color;
  std::vector<MatrixX<Scalar>> clip;
  MatrixX<Scalar> relevancy;
};

/// One FDA patch: a ray per self-supervised feature cell and the (constant)
/// feature correlation between those cells.
template <typename Scalar>
struct PatchTargets {
  std::vector<Ray> rays;
  MatrixX<Scalar> corr_f;
};

struct LossOptions {
  int n_samples = 128;
  bool stratified = false;
  bool color_term = true;   // photometric part of the supervision loss
  bool feature_term = true;  // cosine part of the supervision loss
  bool use_rda = true;
  bool use_fda = true;
  bool fda_balanced = true;
  double tau = 0.2;
  FdaWeights fda;
};

struct LossBreakdown {
  double supervision = 0;
  double rda = 0;
  double fda = 0;
  double total() const { return supervision + rda + fda; }
};

/// Sum over rays of |C_hat - C|^2 - cos(F_hat, S . F). Gradients of the
/// groups in `trainable` are accumulated into the model (none when 0).
template <typename Scalar>
Scalar supervision_loss(FieldModel<Scalar>& model, const RayTargets<Scalar>& batch, const LossOptions& options,
                        GroupMask trainable, std::mt19937_64* rng = nullptr);

/// Photometric loss only (reconstruction stage).
template <typename Scalar>
Scalar photometric_loss(FieldModel<Scalar>& model, std::span<const Ray> rays, const MatrixX<Scalar>& colors,
                        const LossOptions& options, GroupMask trainable, std::mt19937_64* rng = nullptr);

/// Supervision + RDA on the ray batch plus FDA averaged over the patches.
template <typename Scalar>
LossBreakdown total_loss(FieldModel<Scalar>& model, const RayTargets<Scalar>& batch,
                         std::span<const PatchTargets<Scalar>> patches, const MatrixX<Scalar>& text,
                         const LossOptions& options, GroupMask trainable, std::mt19937_64* rng = nullptr);

/// FDA term of one patch given rendered features (D x cells); fills
/// dL/dfeatures when requested.
template <typename Scalar>
Scalar patch_fda_loss(const MatrixX<Scalar>& features, const MatrixX<Scalar>& corr_f, const MatrixX<Scalar>& text,
                      const LossOptions& options, MatrixX<Scalar>* d_features = nullptr);

/// RDA term given rendered features (D x rays) and relevancy targets.
template <typename Scalar>
Scalar feature_rda_loss(const MatrixX<Scalar>& features, const MatrixX<Scalar>& relevancy,
                        const MatrixX<Scalar>& text, MatrixX<Scalar>* d_features = nullptr);

// ---------------------------------------------------------------------------
// Optimizer

/// Bias-corrected Adam with per-tensor step counters, so a group that starts
/// training late gets the usual warm-up.
template <typename Scalar>
class Adam {
 public:
  struct Moments {
    VectorX<Scalar> m;
    VectorX<Scalar> v;
    long long steps = 0;
  };

  Adam(double beta1 = 0.9, double beta2 = 0.99, double eps = 1e-8) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// One update of `tensor` from its accumulated gradient.
  void update(ParamTensor<Scalar>& tensor, double lr);

  /// Updates every tensor of the groups in `trainable` with the rate chosen
  /// by `lr` for its group. Non-finite gradients abort before any change.
  void step(FieldModel<Scalar>& model, GroupMask trainable, const std::function<double(ParamGroup)>& lr);

  const std::map<std::string, Moments>& moments() const { return moments_; }

 private:
  double beta1_, beta2_, eps_;
  std::map<std::string, Moments> moments_;
};

/// lr0 * decay_target^(iteration / total).
double lr_schedule(int iteration, int total, double lr0, double decay_target);

// ---------------------------------------------------------------------------
// Training stages

struct LogRecord {
  std::string stage;
  int iteration = 0;
  LossBreakdown loss;
  double lr_volume = 0;
  double lr_mlp = 0;
  double wall_ms = 0;
};

std::string to_json_line(const LogRecord& record);

struct SegmentationInputs {
  const Scene* scene = nullptr;
  std::vector<const MultiScaleFeatureMap*> features;  // per scene view (null for views without features)
  std::vector<const DinoMap*> dino;                   // per scene view (may be null)
  const TextFeatureBank* bank = nullptr;
};

struct TrainState {
  FieldModel<float> model;
  Adam<float> optimizer;
  std::mt19937_64 rng;
  int iteration = 0;  // within the current stage
  GroupMask trainable = 0;
  std::vector<LogRecord> history;
  std::vector<RelevancyMap> relevancy;  // per scene view at ray-downsample resolution
  std::vector<std::vector<Eigen::MatrixXf>> cosines;  // per view and scale, see scale_cosines
};

TrainState make_train_state(FieldModel<float> model, const TrainConfig& config);

/// Photometric fitting of shared/density volumes and the RGB head.
void train_reconstruction(TrainState& state, const Scene& scene, const TrainConfig& config,
                          std::ostream* log = nullptr);

/// Phase A (selection + feature head) then phase B (adds shared volume and
/// RGB head); the density volume stays frozen throughout.
void train_segmentation(TrainState& state, const SegmentationInputs& inputs, const TrainConfig& config,
                        std::ostream* log = nullptr);

/// Recomputes the normalized relevancy maps of all training views from the
/// current selection volume.
void refresh_relevancy(TrainState& state, const SegmentationInputs& inputs, const TrainConfig& config);

inline constexpr GroupMask kPhaseAGroups = ParamGroup::Selection | ParamGroup::FeatureHead;
inline constexpr GroupMask kPhaseBGroups = kPhaseAGroups | ParamGroup::Shared | ParamGroup::RgbHead;
inline constexpr GroupMask kReconstructionGroups = ParamGroup::Shared | ParamGroup::Density | ParamGroup::RgbHead;

}  // namespace ov3d
