#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ov3d/config.hpp"
#include "ov3d/dataset.hpp"
#include "ov3d/eval.hpp"
#include "ov3d/fda.hpp"
#include "ov3d/patchfeat.hpp"
#include "ov3d/relevancy.hpp"
#include "ov3d/service_encoder.hpp"
#include "ov3d/synthetic.hpp"
#include "ov3d/trainer.hpp"

namespace ov3d {

// One function per pipeline stage, shared by the CLI and the tests.

enum class EncoderKind { Synthetic, Service };
EncoderKind parse_encoder_kind(const std::string& name);

struct EncoderSetup {
  EncoderKind kind = EncoderKind::Synthetic;
  ServiceOptions service;  // used by EncoderKind::Service
};

/// Per-view multi-scale features with one RNG stream per view, so the result
/// does not depend on the order views are processed in.
MultiScaleFeatureMap extract_view_features(const Image& image, const ScaleSpec& scales, PatchEncoder& encoder,
                                           std::uint64_t seed, const ExtractOptions& options = {});

/// Synthetic scenes: the encoder is rebuilt from synthetic.json and masks/.
void run_extract(const std::filesystem::path& scene_dir, const ScaleSpec& scales, const EncoderSetup& encoder,
                 const std::filesystem::path& out_dir, std::uint64_t seed, bool half_precision = false);

void run_textbank(const std::filesystem::path& labels_file, const EncoderSetup& encoder,
                  const std::filesystem::path& out, const std::filesystem::path& scene_dir = {});

void run_reconstruct(const std::filesystem::path& scene_dir, const TrainConfig& config,
                     const std::filesystem::path& out, std::ostream* log = nullptr);

void run_train(const std::filesystem::path& scene_dir, const std::filesystem::path& features_dir,
               const std::filesystem::path& dino_dir, const std::filesystem::path& textbank,
               const TrainConfig& config, const std::filesystem::path& ckpt, const std::filesystem::path& out,
               std::ostream* log = nullptr);

/// Renders and exports every requested view (all test views when empty).
void run_segment(const std::filesystem::path& ckpt, const std::filesystem::path& textbank,
                 const std::filesystem::path& scene_dir, std::vector<std::string> views, double tau, int n_samples,
                 const std::filesystem::path& out);

struct EvalReport {
  std::vector<std::string> views;
  std::vector<std::string> labels;
  ClassMetric iou;
  ClassMetric ap;
  std::vector<int> skipped_ap;

  std::string to_json() const;
};

/// Every mask in `masks_dir` with a matching prediction in `pred_dir`.
EvalReport run_eval(const std::filesystem::path& pred_dir, const std::filesystem::path& masks_dir);

void run_synth(const std::filesystem::path& spec_file, const std::filesystem::path& out);

// ---------------------------------------------------------------------------
// In-memory synthetic pipeline

struct SyntheticInputs {
  SyntheticScene data;
  ScaleSpec scales;
  std::vector<MultiScaleFeatureMap> features;  // per view
};

SyntheticInputs prepare_synthetic(const SyntheticSpec& spec, const ScaleSpec& scales, std::uint64_t seed);

/// Reconstruction of the synthetic scene with a feature branch sized for it.
FieldModel<float> reconstruct_synthetic(const SyntheticInputs& inputs, const TrainConfig& config,
                                        std::ostream* log = nullptr);

struct SegmentationRun {
  TrainState state;
  EvalReport report;
};

/// Segmentation training from a reconstruction, then evaluation on the held
/// out views against the synthetic ground truth.
SegmentationRun segment_synthetic(const SyntheticInputs& inputs, const FieldModel<float>& reconstruction,
                                  const TrainConfig& config, std::ostream* log = nullptr);

EvalReport evaluate_views(const FieldModel<float>& model, const Scene& scene, const std::vector<int>& views,
                          const TextFeatureBank& bank, double tau, int n_samples);

}  // namespace ov3d
