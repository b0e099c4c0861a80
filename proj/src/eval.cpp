#include "ov3d/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "ov3d/error.hpp"
#include "ov3d/npy.hpp"
#include "ov3d/numerics.hpp"

namespace ov3d {

using nlohmann::json;

SegmentationResult segment_features(const Eigen::MatrixXf& features, int rows, int cols, const TextFeatureBank& bank,
                                    double tau) {
  bank.validate();
  require(features.rows() == bank.dim() && features.cols() == static_cast<Eigen::Index>(rows) * cols,
          ErrorCode::ShapeMismatch, "segment: feature map does not match the text bank");
  SegmentationResult out;
  out.labels.resize(rows, cols);
  out.scores.assign(static_cast<std::size_t>(bank.classes()), Plane(rows, cols));
  const Eigen::MatrixXf text = bank.features;
  for (int y = 0; y < rows; ++y) {
    for (int x = 0; x < cols; ++x) {
      const Eigen::Index p = static_cast<Eigen::Index>(y) * cols + x;
      const Eigen::VectorXf z = segmentation_logits<float>(features.col(p), text);
      const Eigen::VectorXf probs = softmax(z, static_cast<float>(tau));
      out.labels(y, x) = static_cast<std::uint8_t>(class_label(z));
      for (int c = 0; c < bank.classes(); ++c) out.scores[static_cast<std::size_t>(c)](y, x) = probs(c);
    }
  }
  return out;
}

SegmentationResult segment_view(const FieldModel<float>& model, const Camera& camera, const TextFeatureBank& bank,
                                double tau, int downsample, int n_samples) {
  require(bank.classes() < 255, ErrorCode::InvalidArgument, "segment_view: at most 254 classes");
  RenderOptions ro;
  ro.n_samples = n_samples;
  ro.need_color = false;
  ro.need_feature = true;
  ro.need_selection = false;
  const ViewRender<float> render = render_view(model, camera, downsample, ro);
  return segment_features(render.feature, render.rows, render.cols, bank, tau);
}

ClassMetric miou(std::span<const LabelMap> pred, std::span<const LabelMap> gt, int classes) {
  require(pred.size() == gt.size(), ErrorCode::ShapeMismatch, "miou: prediction and gt view counts differ");
  require(classes > 0, ErrorCode::InvalidArgument, "miou: no classes");
  std::vector<long long> inter(static_cast<std::size_t>(classes), 0), uni(static_cast<std::size_t>(classes), 0);
  for (std::size_t v = 0; v < pred.size(); ++v) {
    require(pred[v].rows() == gt[v].rows() && pred[v].cols() == gt[v].cols(), ErrorCode::ShapeMismatch,
            "miou: prediction and gt shapes differ");
    for (Eigen::Index i = 0; i < gt[v].size(); ++i) {
      const int g = gt[v].data()[i];
      if (g == kUnlabeled) continue;
      const int p = pred[v].data()[i];
      require(g < classes, ErrorCode::OutOfRange, "miou: gt class out of range");
      if (p == g) {
        ++inter[static_cast<std::size_t>(g)];
        ++uni[static_cast<std::size_t>(g)];
      } else {
        ++uni[static_cast<std::size_t>(g)];
        if (p < classes) ++uni[static_cast<std::size_t>(p)];
      }
    }
  }
  ClassMetric out;
  double sum = 0;
  int counted = 0;
  for (int c = 0; c < classes; ++c) {
    if (uni[static_cast<std::size_t>(c)] == 0) {
      out.per_class.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const double iou = static_cast<double>(inter[static_cast<std::size_t>(c)]) / uni[static_cast<std::size_t>(c)];
    out.per_class.push_back(iou);
    sum += iou;
    ++counted;
  }
  out.mean = counted > 0 ? sum / counted : 0.0;
  return out;
}

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> positive) {
  require(scores.size() == positive.size(), ErrorCode::ShapeMismatch, "average_precision: size mismatch");
  const long long total_pos = std::count_if(positive.begin(), positive.end(), [](std::uint8_t v) { return v != 0; });
  if (total_pos == 0) return 0.0;
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  // One (recall, precision) point per distinct score threshold.
  std::vector<double> recall, precision;
  long long tp = 0, seen = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      tp += positive[order[j]] != 0;
      ++j;
    }
    seen += static_cast<long long>(j - i);
    recall.push_back(static_cast<double>(tp) / total_pos);
    precision.push_back(static_cast<double>(tp) / seen);
    i = j;
  }
  for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0, prev = 0;
  for (std::size_t k = 0; k < recall.size(); ++k) {
    ap += (recall[k] - prev) * precision[k];
    prev = recall[k];
  }
  return ap;
}

ClassMetric map_metric(std::span<const std::vector<Plane>> scores, std::span<const LabelMap> gt, int classes,
                       std::vector<int>* skipped) {
  require(scores.size() == gt.size(), ErrorCode::ShapeMismatch, "map_metric: score and gt view counts differ");
  ClassMetric out;
  double sum = 0;
  int counted = 0;
  for (int c = 0; c < classes; ++c) {
    std::vector<double> s;
    std::vector<std::uint8_t> pos;
    for (std::size_t v = 0; v < gt.size(); ++v) {
      require(static_cast<int>(scores[v].size()) == classes, ErrorCode::ShapeMismatch,
              "map_metric: score maps per class expected");
      const Plane& plane = scores[v][static_cast<std::size_t>(c)];
      require(plane.rows() == gt[v].rows() && plane.cols() == gt[v].cols(), ErrorCode::ShapeMismatch,
              "map_metric: score and gt shapes differ");
      for (Eigen::Index i = 0; i < gt[v].size(); ++i) {
        const int g = gt[v].data()[i];
        if (g == kUnlabeled) continue;
        const double value = plane.data()[i];
        require(std::isfinite(value), ErrorCode::Numerical, "map_metric: non-finite score");
        s.push_back(value);
        pos.push_back(g == c);
      }
    }
    if (std::find(pos.begin(), pos.end(), 1) == pos.end()) {
      out.per_class.push_back(std::numeric_limits<double>::quiet_NaN());
      if (skipped) skipped->push_back(c);
      continue;
    }
    const double ap = average_precision(s, pos);
    out.per_class.push_back(ap);
    sum += ap;
    ++counted;
  }
  out.mean = counted > 0 ? sum / counted : 0.0;
  return out;
}

void export_maps(const SegmentationResult& result, const std::vector<std::string>& labels,
                 const std::filesystem::path& dir) {
  require(static_cast<int>(labels.size()) == result.classes(), ErrorCode::ShapeMismatch,
          "export_maps: one label per score map expected");
  std::filesystem::create_directories(dir);
  const std::string& id = result.view_id;
  write_indexed_png(result.labels, dir / (id + "_labels.png"));
  NpyArray scores;
  const auto rows = static_cast<std::size_t>(result.labels.rows()), cols = static_cast<std::size_t>(result.labels.cols());
  scores.shape = {labels.size(), rows, cols};
  json index;
  index["view_id"] = id;
  index["labels"] = labels;
  index["label_map"] = id + "_labels.png";
  index["scores"] = id + "_scores.npy";
  index["heatmaps"] = json::array();
  for (int c = 0; c < result.classes(); ++c) {
    const Plane& p = result.scores[static_cast<std::size_t>(c)];
    scores.data.insert(scores.data.end(), p.data(), p.data() + p.size());
    const std::string name = id + "_score_" + std::to_string(c) + ".png";
    write_gray_png(p, dir / name);
    index["heatmaps"].push_back(name);
  }
  write_npy(scores, dir / (id + "_scores.npy"), true);
  std::ofstream(dir / (id + ".json")) << index.dump(2) << "\n";
}

SegmentationResult import_maps(const std::filesystem::path& dir, const std::string& view_id) {
  SegmentationResult out;
  out.view_id = view_id;
  out.labels = read_indexed_png(dir / (view_id + "_labels.png"));
  const NpyArray scores = read_npy(dir / (view_id + "_scores.npy"));
  if (scores.shape.size() != 3 || scores.shape[1] != static_cast<std::size_t>(out.labels.rows()) ||
      scores.shape[2] != static_cast<std::size_t>(out.labels.cols())) {
    fail(ErrorCode::ShapeMismatch, "scores of view " + view_id + " do not match its label map");
  }
  const std::size_t plane = scores.shape[1] * scores.shape[2];
  for (std::size_t c = 0; c < scores.shape[0]; ++c) {
    Plane p(out.labels.rows(), out.labels.cols());
    for (std::size_t i = 0; i < plane; ++i) p.data()[i] = static_cast<float>(scores.data[c * plane + i]);
    out.scores.push_back(std::move(p));
  }
  return out;
}

}  // namespace ov3d
