#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <string>
#include <vector>

#include "ov3d/numerics.hpp"
#include "ov3d/patchfeat.hpp"

namespace ov3d {

/// One text feature per class, rows of `features` (C x D).
struct TextFeatureBank {
  std::vector<std::string> labels;
  Eigen::MatrixXf features;

  int classes() const { return static_cast<int>(features.rows()); }
  int dim() const { return static_cast<int>(features.cols()); }
  /// Rows nonzero, labels unique, one label per row.
  void validate() const;
};

void write_text_bank(const TextFeatureBank& bank, const std::filesystem::path& path);
TextFeatureBank read_text_bank(const std::filesystem::path& path);

/// z_c = cos(T_c, feature). A zero feature yields zeros and sets `*zero`.
template <typename Scalar>
VectorX<Scalar> segmentation_logits(const VectorX<Scalar>& feature, const MatrixX<Scalar>& text,
                                    bool* zero = nullptr);

/// dL/dfeature given dL/dz.
template <typename Scalar>
VectorX<Scalar> segmentation_logits_backward(const VectorX<Scalar>& feature, const MatrixX<Scalar>& text,
                                             const VectorX<Scalar>& d_logits);

/// argmax with lowest-index tie-break.
template <typename Derived>
Index class_label(const Eigen::MatrixBase<Derived>& z) {
  if (z.size() == 0) fail(ErrorCode::InvalidArgument, "class_label: empty logits");
  Index best = 0;
  for (Index c = 1; c < z.size(); ++c)
    if (z(c) > z(best)) best = c;
  return best;
}

/// Per-class relevancy over a pixel grid (columns are pixels, row-major).
struct RelevancyMap {
  std::string view_id;
  int height = 0;
  int width = 0;
  Eigen::MatrixXf raw;         // C x (H*W)
  Eigen::MatrixXf normalized;  // C x (H*W)
};

/// Cosine of every class text feature against every scale's pixel feature,
/// sampled at the centres of the `downsample` grid: one C x P matrix per scale.
std::vector<Eigen::MatrixXf> scale_cosines(const MultiScaleFeatureMap& features, const TextFeatureBank& bank,
                                           int downsample = 1);

/// raw[c, p] = sum_s selection[s, p] * cosines[s](c, p).
RelevancyMap relevancy_from_cosines(const std::vector<Eigen::MatrixXf>& cosines, const Eigen::MatrixXf& selection,
                                    int height, int width);

/// Relevancy of a feature map under a per-pixel selection (N_s x P), on the
/// grid downsampled by `downsample`. `normalized` is left empty.
RelevancyMap relevancy_map(const MultiScaleFeatureMap& features, const Eigen::MatrixXf& selection,
                           const TextFeatureBank& bank, int downsample = 1);

inline constexpr double kRelevancyEps = 1e-8;

/// Per-class affine rescale of raw to [0, 1]; constant rows become zeros.
void normalize_relevancy(RelevancyMap& map);

/// Sum over rays and classes of the JS integrand between P (columns are
/// probability vectors) and relevancy targets R in [0, 1]. R is used as is,
/// clamped below at 1e-10. Fills dL/dP when `d_probs` is given.
template <typename Scalar>
Scalar rda_loss(const MatrixX<Scalar>& probs, const MatrixX<Scalar>& relevancy, MatrixX<Scalar>* d_probs = nullptr);

}  // namespace ov3d
