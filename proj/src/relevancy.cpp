#include "ov3d/relevancy.hpp"

#include <set>

#include "ov3d/binary_io.hpp"

namespace ov3d {

void TextFeatureBank::validate() const {
  require(static_cast<Index>(labels.size()) == features.rows(), ErrorCode::ShapeMismatch,
          "text bank: label count differs from row count");
  require(features.rows() > 0 && features.cols() > 0, ErrorCode::InvalidArgument, "text bank: empty");
  std::set<std::string> seen;
  for (Index c = 0; c < features.rows(); ++c) {
    const auto& label = labels[static_cast<std::size_t>(c)];
    require(!label.empty(), ErrorCode::InvalidArgument, "text bank: empty label");
    require(seen.insert(label).second, ErrorCode::InvalidArgument, "text bank: duplicate label '" + label + "'");
    require(features.row(c).norm() > 0, ErrorCode::InvalidArgument, "text bank: zero row for '" + label + "'");
  }
}

void write_text_bank(const TextFeatureBank& bank, const std::filesystem::path& path) {
  bank.validate();
  BinaryWriter w;
  w.magic("OVTB");
  w.u32(static_cast<std::uint32_t>(bank.classes()));
  w.u32(static_cast<std::uint32_t>(bank.dim()));
  for (const auto& l : bank.labels) w.string(l);
  for (Index c = 0; c < bank.features.rows(); ++c)
    for (Index d = 0; d < bank.features.cols(); ++d) w.f32(bank.features(c, d));
  w.save(path);
}

TextFeatureBank read_text_bank(const std::filesystem::path& path) {
  BinaryReader r = BinaryReader::from_file(path);
  r.expect_magic("OVTB");
  const std::uint32_t c = r.u32();
  const std::uint32_t d = r.u32();
  TextFeatureBank bank;
  for (std::uint32_t i = 0; i < c; ++i) bank.labels.push_back(r.string());
  if (r.remaining() < static_cast<std::size_t>(c) * d * 4) {
    fail(ErrorCode::Truncated, "truncated: text bank payload in " + path.string());
  }
  bank.features.resize(c, d);
  for (std::uint32_t i = 0; i < c; ++i)
    for (std::uint32_t j = 0; j < d; ++j) bank.features(i, j) = r.f32();
  if (!r.at_end()) fail(ErrorCode::Format, "trailing bytes in text bank " + path.string());
  bank.validate();
  return bank;
}

template <typename Scalar>
VectorX<Scalar> segmentation_logits(const VectorX<Scalar>& feature, const MatrixX<Scalar>& text, bool* zero) {
  require(feature.size() == text.cols(), ErrorCode::ShapeMismatch, "segmentation_logits: feature dimension");
  VectorX<Scalar> z(text.rows());
  const bool is_zero = feature.norm() == Scalar(0);
  if (zero) *zero = is_zero;
  if (is_zero) return VectorX<Scalar>::Zero(text.rows());
  for (Index c = 0; c < text.rows(); ++c)
    z(c) = cosine_similarity(text.row(c).transpose(), feature, ZeroNorm::Lenient);
  return z;
}

template <typename Scalar>
VectorX<Scalar> segmentation_logits_backward(const VectorX<Scalar>& feature, const MatrixX<Scalar>& text,
                                             const VectorX<Scalar>& d_logits) {
  VectorX<Scalar> g = VectorX<Scalar>::Zero(feature.size());
  for (Index c = 0; c < text.rows(); ++c) {
    if (d_logits(c) == Scalar(0)) continue;
    g += d_logits(c) * cosine_similarity_grad<Scalar>(feature, text.row(c).transpose());
  }
  return g;
}

std::vector<Eigen::MatrixXf> scale_cosines(const MultiScaleFeatureMap& features, const TextFeatureBank& bank,
                                           int downsample) {
  require(downsample >= 1, ErrorCode::InvalidArgument, "scale_cosines: downsample must be >= 1");
  require(features.dim == bank.dim(), ErrorCode::ShapeMismatch,
          "feature map dimension " + std::to_string(features.dim) + " differs from text bank dimension " +
              std::to_string(bank.dim()));
  const int rows = features.height / downsample;
  const int cols = features.width / downsample;
  std::vector<Eigen::MatrixXf> out;
  for (int s = 0; s < features.n_scales(); ++s) {
    Eigen::MatrixXf m(bank.classes(), rows * cols);
    for (int y = 0; y < rows; ++y) {
      for (int x = 0; x < cols; ++x) {
        const int py = y * downsample + downsample / 2;
        const int px = x * downsample + downsample / 2;
        const Eigen::VectorXf f = features.feature(s, py, px);
        const Index p = static_cast<Index>(y) * cols + x;
        for (Index c = 0; c < bank.features.rows(); ++c)
          m(c, p) = cosine_similarity(bank.features.row(c).transpose(), f, ZeroNorm::Lenient);
      }
    }
    out.push_back(std::move(m));
  }
  return out;
}

RelevancyMap relevancy_from_cosines(const std::vector<Eigen::MatrixXf>& cosines, const Eigen::MatrixXf& selection,
                                    int height, int width) {
  require(!cosines.empty(), ErrorCode::InvalidArgument, "relevancy: no scales");
  require(selection.rows() == static_cast<Index>(cosines.size()) &&
              selection.cols() == static_cast<Index>(height) * width && cosines[0].cols() == selection.cols(),
          ErrorCode::ShapeMismatch, "relevancy: selection shape does not match feature grid");
  RelevancyMap map;
  map.height = height;
  map.width = width;
  map.raw = Eigen::MatrixXf::Zero(cosines[0].rows(), selection.cols());
  for (std::size_t s = 0; s < cosines.size(); ++s)
    map.raw += cosines[s] * selection.row(static_cast<Index>(s)).asDiagonal();
  return map;
}

RelevancyMap relevancy_map(const MultiScaleFeatureMap& features, const Eigen::MatrixXf& selection,
                           const TextFeatureBank& bank, int downsample) {
  RelevancyMap map = relevancy_from_cosines(scale_cosines(features, bank, downsample), selection,
                                            features.height / downsample, features.width / downsample);
  map.view_id = features.image_id;
  return map;
}

void normalize_relevancy(RelevancyMap& map) {
  map.normalized.resizeLike(map.raw);
  for (Index c = 0; c < map.raw.rows(); ++c) {
    const Eigen::ArrayXf row = map.raw.row(c).array().cast<float>();
    const float lo = row.minCoeff();
    const float hi = row.maxCoeff();
    if (hi == lo) {
      map.normalized.row(c).setZero();
      continue;
    }
    const double span = static_cast<double>(hi) - lo + kRelevancyEps;
    for (Index p = 0; p < row.size(); ++p)
      map.normalized(c, p) = static_cast<float>((static_cast<double>(row(p)) - lo) / span);
  }
}

template <typename Scalar>
Scalar rda_loss(const MatrixX<Scalar>& probs, const MatrixX<Scalar>& relevancy, MatrixX<Scalar>* d_probs) {
  require(probs.rows() == relevancy.rows() && probs.cols() == relevancy.cols(), ErrorCode::ShapeMismatch,
          "rda_loss: batch shapes differ");
  const bool in_range = (probs.array() >= Scalar(0)).all() && (probs.array() <= Scalar(1)).all() &&
                        (relevancy.array() >= Scalar(0)).all() && (relevancy.array() <= Scalar(1)).all();
  require(in_range, ErrorCode::InvalidArgument, "rda_loss: entries outside [0, 1]");
  if (d_probs) d_probs->resizeLike(probs);
  Scalar total = 0;
  for (Index r = 0; r < probs.cols(); ++r) {
    for (Index c = 0; c < probs.rows(); ++c) {
      const Scalar p = probs(c, r);
      const Scalar q = std::max(relevancy(c, r), Scalar(kEps));
      total += detail::js_class_term(p, q);
      if (d_probs) (*d_probs)(c, r) = detail::js_class_grad(p, q);
    }
  }
  return total;
}

template VectorX<float> segmentation_logits(const VectorX<float>&, const MatrixX<float>&, bool*);
template VectorX<double> segmentation_logits(const VectorX<double>&, const MatrixX<double>&, bool*);
template VectorX<float> segmentation_logits_backward(const VectorX<float>&, const MatrixX<float>&,
                                                     const VectorX<float>&);
template VectorX<double> segmentation_logits_backward(const VectorX<double>&, const MatrixX<double>&,
                                                      const VectorX<double>&);
template float rda_loss(const MatrixX<float>&, const MatrixX<float>&, MatrixX<float>*);
template double rda_loss(const MatrixX<double>&, const MatrixX<double>&, MatrixX<double>*);

}  // namespace ov3d
