#include "ov3d/fda.hpp"

#include "ov3d/binary_io.hpp"

namespace ov3d {

Eigen::VectorXf DinoMap::cell(int y, int x) const {
  Eigen::VectorXf f(dim);
  const Index plane = static_cast<Index>(height) * width;
  for (int d = 0; d < dim; ++d) f(d) = data(d * plane + static_cast<Index>(y) * width + x);
  return f;
}

void write_dino_map(const DinoMap& map, const std::filesystem::path& path) {
  require(map.data.size() == static_cast<Index>(map.dim) * map.height * map.width, ErrorCode::ShapeMismatch,
          "write_dino_map: payload size");
  BinaryWriter w;
  w.magic("OVDN");
  w.u32(static_cast<std::uint32_t>(map.dim));
  w.u32(static_cast<std::uint32_t>(map.height));
  w.u32(static_cast<std::uint32_t>(map.width));
  w.u32(static_cast<std::uint32_t>(map.stride));
  for (Index i = 0; i < map.data.size(); ++i) w.f32(map.data(i));
  w.save(path);
}

DinoMap read_dino_map(const std::filesystem::path& path) {
  BinaryReader r = BinaryReader::from_file(path);
  r.expect_magic("OVDN");
  DinoMap map;
  map.view_id = path.stem().string();
  map.dim = static_cast<int>(r.u32());
  map.height = static_cast<int>(r.u32());
  map.width = static_cast<int>(r.u32());
  map.stride = static_cast<int>(r.u32());
  require(map.stride > 0, ErrorCode::Format, "dino map stride is 0 in " + path.string());
  const std::size_t n = static_cast<std::size_t>(map.dim) * map.height * map.width;
  if (r.remaining() < n * 4) fail(ErrorCode::Truncated, "truncated: dino map payload in " + path.string());
  map.data.resize(static_cast<Index>(n));
  for (std::size_t i = 0; i < n; ++i) map.data(static_cast<Index>(i)) = r.f32();
  if (!r.at_end()) fail(ErrorCode::Format, "trailing bytes in dino map " + path.string());
  return map;
}

Eigen::MatrixXf dino_patch(const DinoMap& map, int y0, int x0, int h, int w) {
  require(y0 >= 0 && x0 >= 0 && y0 + h <= map.height && x0 + w <= map.width, ErrorCode::OutOfRange,
          "dino_patch: window outside the map");
  Eigen::MatrixXf cells(map.dim, h * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) cells.col(y * w + x) = map.cell(y0 + y, x0 + x);
  return cells;
}

template <typename Scalar>
MatrixX<Scalar> feature_correlation(const MatrixX<Scalar>& cells, bool* had_zero) {
  const Index n = cells.cols();
  MatrixX<Scalar> corr(n, n);
  bool zero = false;
  for (Index i = 0; i < n; ++i) {
    const bool zi = cells.col(i).norm() == Scalar(0);
    zero = zero || zi;
    corr(i, i) = zi ? Scalar(0) : Scalar(1);
    for (Index j = i + 1; j < n; ++j) {
      const Scalar c = cosine_similarity(cells.col(i), cells.col(j), ZeroNorm::Lenient);
      corr(i, j) = c;
      corr(j, i) = c;
    }
  }
  if (had_zero) *had_zero = zero;
  return corr;
}

template <typename Scalar>
MatrixX<Scalar> distribution_correlation(const MatrixX<Scalar>& probs) {
  const Index n = probs.cols();
  for (Index i = 0; i < n; ++i) require_prob_vec(probs.col(i), "distribution_correlation");
  MatrixX<Scalar> corr(n, n);
  for (Index i = 0; i < n; ++i) {
    corr(i, i) = 0;
    for (Index j = i + 1; j < n; ++j) {
      const Scalar v = js_divergence(probs.col(i), probs.col(j));
      corr(i, j) = v;
      corr(j, i) = v;
    }
  }
  return corr;
}

template <typename Scalar>
MatrixX<Scalar> distribution_correlation_backward(const MatrixX<Scalar>& probs, const MatrixX<Scalar>& d_corr) {
  const Index n = probs.cols();
  MatrixX<Scalar> d = MatrixX<Scalar>::Zero(probs.rows(), n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = i + 1; j < n; ++j) {
      const Scalar g = d_corr(i, j) + d_corr(j, i);
      if (g == Scalar(0)) continue;
      // The divergence is capped at 1; past the cap it is locally constant.
      if (js_terms(probs.col(i), probs.col(j)) >= Scalar(1)) continue;
      d.col(i) += g * js_divergence_grad(probs.col(i), probs.col(j));
      d.col(j) += g * js_divergence_grad(probs.col(j), probs.col(i));
    }
  }
  return d;
}

template <typename Scalar>
Scalar correlation_loss(const MatrixX<Scalar>& corr_f, const MatrixX<Scalar>& corr_d, Scalar b,
                        MatrixX<Scalar>* d_corr_d) {
  require(corr_f.rows() == corr_d.rows() && corr_f.cols() == corr_d.cols(), ErrorCode::ShapeMismatch,
          "correlation_loss: shape mismatch");
  const auto shifted = (corr_f.array() - b).eval();
  if (d_corr_d) *d_corr_d = shifted.matrix();
  return (shifted * corr_d.array()).sum();
}

template <typename Scalar>
Scalar fda_loss(const MatrixX<Scalar>& corr_f, const MatrixX<Scalar>& corr_d, const FdaWeights& weights,
                MatrixX<Scalar>* d_corr_d, FdaTerms* terms) {
  require(corr_f.rows() == corr_d.rows() && corr_f.cols() == corr_d.cols(), ErrorCode::ShapeMismatch,
          "fda_loss: shape mismatch");
  require(weights.lambda_pos >= 0 && weights.lambda_neg >= 0, ErrorCode::InvalidArgument,
          "fda_loss: negative weight");
  const auto shifted = (corr_f.array() - static_cast<Scalar>(weights.b)).eval();
  const auto pos = clamp_min0(shifted).eval();
  const auto neg = clamp_max0(shifted).eval();
  const Index nnz_pos = (pos != Scalar(0)).count();
  const Index nnz_neg = (neg != Scalar(0)).count();
  const bool mean = weights.normalization == FdaNormalization::Mean;
  const Scalar scale_pos = nnz_pos == 0 ? Scalar(0)
                                        : static_cast<Scalar>(weights.lambda_pos) /
                                              (mean ? static_cast<Scalar>(nnz_pos) : Scalar(1));
  const Scalar scale_neg = nnz_neg == 0 ? Scalar(0)
                                        : static_cast<Scalar>(weights.lambda_neg) /
                                              (mean ? static_cast<Scalar>(nnz_neg) : Scalar(1));
  const Scalar lp = scale_pos * (pos * corr_d.array()).sum();
  const Scalar ln = scale_neg * (neg * corr_d.array()).sum();
  if (d_corr_d) *d_corr_d = (scale_pos * pos + scale_neg * neg).matrix();
  if (terms) {
    terms->positive = static_cast<double>(lp);
    terms->negative = static_cast<double>(ln);
    terms->nnz_positive = nnz_pos;
    terms->nnz_negative = nnz_neg;
  }
  return lp + ln;
}

#define OV3D_INSTANTIATE(S)                                                                          \
  template MatrixX<S> feature_correlation(const MatrixX<S>&, bool*);                                 \
  template MatrixX<S> distribution_correlation(const MatrixX<S>&);                                   \
  template MatrixX<S> distribution_correlation_backward(const MatrixX<S>&, const MatrixX<S>&);       \
  template S correlation_loss(const MatrixX<S>&, const MatrixX<S>&, S, MatrixX<S>*);                 \
  template S fda_loss(const MatrixX<S>&, const MatrixX<S>&, const FdaWeights&, MatrixX<S>*, FdaTerms*);

OV3D_INSTANTIATE(float)
OV3D_INSTANTIATE(double)
#undef OV3D_INSTANTIATE

}  // namespace ov3d
