#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ov3d/field.hpp"
#include "ov3d/image.hpp"
#include "ov3d/relevancy.hpp"
#include "ov3d/renderer.hpp"

namespace ov3d {

struct SegmentationResult {
  std::string view_id;
  LabelMap labels;            // argmax class per pixel
  std::vector<Plane> scores;  // per class, sharpened probabilities

  int classes() const { return static_cast<int>(scores.size()); }
};

/// Renders the feature map of the view, scores it against the text bank and
/// labels each pixel by its best class.
SegmentationResult segment_view(const FieldModel<float>& model, const Camera& camera, const TextFeatureBank& bank,
                                double tau, int downsample = 1, int n_samples = 128);

/// Scores and labels from a D x pixels feature matrix (row-major pixels).
SegmentationResult segment_features(const Eigen::MatrixXf& features, int rows, int cols, const TextFeatureBank& bank,
                                    double tau);

/// Per-class values are NaN for classes excluded from the mean.
struct ClassMetric {
  std::vector<double> per_class;
  double mean = 0;
};

/// IoU per class over the pixels of all views pooled, 255 in gt excluded.
/// Classes absent from both prediction and gt do not enter the mean.
ClassMetric miou(std::span<const LabelMap> pred, std::span<const LabelMap> gt, int classes);

/// All-point interpolated average precision of each class, pixels of all
/// views pooled and ranked by score; tied scores form one threshold. Classes
/// absent from gt are skipped (named in `skipped` when given).
ClassMetric map_metric(std::span<const std::vector<Plane>> scores, std::span<const LabelMap> gt, int classes,
                       std::vector<int>* skipped = nullptr);

/// AP of one binary ranking problem.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> positive);

/// <dir>/<view>_labels.png (indexed), <view>_score_<c>.png (gray),
/// <view>_scores.npy (C x H x W f32) and <view>.json describing them.
void export_maps(const SegmentationResult& result, const std::vector<std::string>& labels,
                 const std::filesystem::path& dir);

/// Reads back what export_maps wrote (labels and scores).
SegmentationResult import_maps(const std::filesystem::path& dir, const std::string& view_id);

}  // namespace ov3d
