#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <string>

#include "ov3d/numerics.hpp"

namespace ov3d {

/// Dense self-supervised feature map of one view: D x H' x W' cells, each
/// cell covering `stride` x `stride` image pixels.
struct DinoMap {
  std::string view_id;
  int dim = 0;
  int height = 0;
  int width = 0;
  int stride = 8;
  Eigen::VectorXf data;  // (d, y, x) row-major

  Eigen::VectorXf cell(int y, int x) const;
};

void write_dino_map(const DinoMap& map, const std::filesystem::path& path);
DinoMap read_dino_map(const std::filesystem::path& path);

/// Cells of the h x w window at (y0, x0) as columns (D x h*w), row-major.
Eigen::MatrixXf dino_patch(const DinoMap& map, int y0, int x0, int h, int w);

/// Pairwise cosine similarity between cells (columns of `cells`). Exactly
/// symmetric; the diagonal is 1 except for zero cells, which get 0 and set
/// `*had_zero`.
template <typename Scalar>
MatrixX<Scalar> feature_correlation(const MatrixX<Scalar>& cells, bool* had_zero = nullptr);

/// Pairwise JS divergence between probability vectors (columns of `probs`).
template <typename Scalar>
MatrixX<Scalar> distribution_correlation(const MatrixX<Scalar>& probs);

/// dL/dprobs given dL/dcorr_d.
template <typename Scalar>
MatrixX<Scalar> distribution_correlation_backward(const MatrixX<Scalar>& probs, const MatrixX<Scalar>& d_corr);

/// Unbalanced form: sum((corr_f - b) * corr_d).
template <typename Scalar>
Scalar correlation_loss(const MatrixX<Scalar>& corr_f, const MatrixX<Scalar>& corr_d, Scalar b,
                        MatrixX<Scalar>* d_corr_d = nullptr);

enum class FdaNormalization { Mean, Sum };

struct FdaWeights {
  double b = 0.7;
  double lambda_pos = 200;
  double lambda_neg = 0.2;
  FdaNormalization normalization = FdaNormalization::Mean;
};

struct FdaTerms {
  double positive = 0;
  double negative = 0;
  Index nnz_positive = 0;
  Index nnz_negative = 0;
};

/// Re-balanced loss: the parts of corr_f above and below b are weighted
/// separately and each averaged over its own support (nnz counts include
/// the diagonal). An empty support contributes 0.
template <typename Scalar>
Scalar fda_loss(const MatrixX<Scalar>& corr_f, const MatrixX<Scalar>& corr_d, const FdaWeights& weights,
                MatrixX<Scalar>* d_corr_d = nullptr, FdaTerms* terms = nullptr);

}  // namespace ov3d
