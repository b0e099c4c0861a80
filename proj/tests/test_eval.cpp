#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>
#include <set>

#include "ov3d/error.hpp"
#include "ov3d/eval.hpp"

using namespace ov3d;

namespace {

// IoU by counting set memberships pixel by pixel.
std::vector<double> iou_oracle(const std::vector<LabelMap>& pred, const std::vector<LabelMap>& gt, int classes) {
  std::vector<double> out;
  for (int c = 0; c < classes; ++c) {
    long long i = 0, u = 0;
    for (std::size_t v = 0; v < gt.size(); ++v)
      for (Eigen::Index k = 0; k < gt[v].size(); ++k) {
        if (gt[v](k) == kUnlabeled) continue;
        const bool in_p = pred[v](k) == c, in_g = gt[v](k) == c;
        i += in_p && in_g;
        u += in_p || in_g;
      }
    out.push_back(u == 0 ? NAN : static_cast<double>(i) / u);
  }
  return out;
}

// AP from precision and recall counted afresh at every distinct threshold.
double ap_oracle(const std::vector<double>& s, const std::vector<std::uint8_t>& pos) {
  const std::set<double, std::greater<>> thresholds(s.begin(), s.end());
  const double total = std::count(pos.begin(), pos.end(), 1);
  std::vector<double> p, r;
  for (double t : thresholds) {
    double tp = 0, n = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] >= t) {
        ++n;
        tp += pos[i];
      }
    p.push_back(tp / n);
    r.push_back(tp / total);
  }
  double ap = 0;
  for (std::size_t k = 0; k < r.size(); ++k) {
    const double best = *std::max_element(p.begin() + static_cast<std::ptrdiff_t>(k), p.end());
    ap += (r[k] - (k ? r[k - 1] : 0.0)) * best;
  }
  return ap;
}

LabelMap random_labels(std::mt19937_64& rng, int classes, bool holes) {
  std::uniform_int_distribution<int> c(0, classes - 1), h(0, 9);
  LabelMap m(8, 8);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = static_cast<std::uint8_t>(holes && h(rng) == 0 ? kUnlabeled : c(rng));
  return m;
}

}  // namespace

TEST_CASE("average precision on hand-worked rankings") {
  const std::vector<double> s{0.9, 0.8, 0.7, 0.6};
  CHECK(average_precision(s, std::vector<std::uint8_t>{1, 0, 1, 0}) == doctest::Approx(0.5 + 0.5 * 2.0 / 3.0));
  CHECK(average_precision(s, std::vector<std::uint8_t>{1, 1, 0, 0}) == 1.0);
  // Worst ranking and a single tied threshold both give the positive rate.
  CHECK(average_precision(s, std::vector<std::uint8_t>{0, 0, 1, 1}) == doctest::Approx(0.5));
  CHECK(average_precision(std::vector<double>(4, 0.3), std::vector<std::uint8_t>{0, 1, 0, 0}) == doctest::Approx(0.25));
  CHECK(average_precision(s, std::vector<std::uint8_t>{0, 0, 0, 0}) == 0.0);
  CHECK_THROWS_AS(average_precision(s, std::vector<std::uint8_t>{1}), Error);
}

TEST_CASE("average precision matches the threshold-sweep oracle, ties included") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> level(0, 6), bit(0, 2);
  for (int t = 0; t < 200; ++t) {
    const int n = 1 + t % 40;
    std::vector<double> s(static_cast<std::size_t>(n));
    std::vector<std::uint8_t> pos(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      s[static_cast<std::size_t>(i)] = level(rng) / 6.0;
      pos[static_cast<std::size_t>(i)] = bit(rng) == 0;
    }
    if (std::count(pos.begin(), pos.end(), 1) == 0) pos[0] = 1;
    const double ap = average_precision(s, pos);
    CHECK(ap == doctest::Approx(ap_oracle(s, pos)).epsilon(1e-12));
    CHECK(ap > 0);
    CHECK(ap <= 1);

    // Reordering the items does not change the result.
    std::vector<std::size_t> perm(s.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> s2;
    std::vector<std::uint8_t> p2;
    for (auto i : perm) {
      s2.push_back(s[i]);
      p2.push_back(pos[i]);
    }
    CHECK(average_precision(s2, p2) == doctest::Approx(ap).epsilon(1e-12));
  }
}

TEST_CASE("mIoU matches the set-counting oracle on random maps") {
  std::mt19937_64 rng(12);
  for (int t = 0; t < 100; ++t) {
    const int classes = 2 + t % 4;
    std::vector<LabelMap> pred, gt;
    for (int v = 0; v < 1 + t % 3; ++v) {
      pred.push_back(random_labels(rng, classes, false));
      gt.push_back(random_labels(rng, classes, true));
    }
    const ClassMetric m = miou(pred, gt, classes);
    const auto want = iou_oracle(pred, gt, classes);
    double sum = 0;
    int n = 0;
    for (int c = 0; c < classes; ++c) {
      if (std::isnan(want[static_cast<std::size_t>(c)])) {
        CHECK(std::isnan(m.per_class[static_cast<std::size_t>(c)]));
        continue;
      }
      CHECK(m.per_class[static_cast<std::size_t>(c)] == doctest::Approx(want[static_cast<std::size_t>(c)]).epsilon(1e-12));
      sum += want[static_cast<std::size_t>(c)];
      ++n;
    }
    CHECK(m.mean == doctest::Approx(sum / n).epsilon(1e-12));
  }
}

TEST_CASE("mIoU edge cases") {
  LabelMap gt(2, 2), pred(2, 2);
  gt << 0, 1, 1, kUnlabeled;
  pred = gt;
  pred(1, 1) = 2;  // ignored pixel: its prediction does not matter
  const std::vector<LabelMap> g{gt}, p{pred};
  const ClassMetric m = miou(p, g, 3);
  CHECK(m.per_class[0] == 1.0);
  CHECK(m.per_class[1] == 1.0);
  CHECK(std::isnan(m.per_class[2]));
  CHECK(m.mean == 1.0);

  // A uniform prediction scores the covered fraction of that class only.
  LabelMap uniform = LabelMap::Zero(2, 2);
  const ClassMetric u = miou(std::vector<LabelMap>{uniform}, g, 2);
  CHECK(u.per_class[0] == doctest::Approx(1.0 / 3.0));
  CHECK(u.per_class[1] == 0.0);

  CHECK_THROWS_AS(miou(std::vector<LabelMap>{LabelMap::Zero(3, 2)}, g, 2), Error);
  CHECK_THROWS_AS(miou(p, std::vector<LabelMap>{}, 2), Error);
  LabelMap bad = gt;
  bad(0, 0) = 7;
  CHECK_THROWS_AS(miou(p, std::vector<LabelMap>{bad}, 3), Error);
}

TEST_CASE("mAP pools views, skips absent classes and is equivariant to class relabeling") {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<float> u(0, 1);
  const int classes = 3;
  std::vector<LabelMap> gt;
  std::vector<std::vector<Plane>> scores;
  for (int v = 0; v < 2; ++v) {
    LabelMap g = random_labels(rng, 2, true);  // class 2 never appears
    gt.push_back(g);
    std::vector<Plane> s;
    for (int c = 0; c < classes; ++c) {
      Plane p(8, 8);
      for (Eigen::Index i = 0; i < p.size(); ++i) p(i) = u(rng);
      s.push_back(p);
    }
    scores.push_back(s);
  }
  std::vector<int> skipped;
  const ClassMetric m = map_metric(scores, gt, classes, &skipped);
  CHECK(skipped == std::vector<int>{2});
  CHECK(std::isnan(m.per_class[2]));
  for (int c = 0; c < 2; ++c) {
    std::vector<double> s;
    std::vector<std::uint8_t> pos;
    for (int v = 0; v < 2; ++v)
      for (Eigen::Index i = 0; i < 64; ++i) {
        if (gt[static_cast<std::size_t>(v)](i) == kUnlabeled) continue;
        s.push_back(scores[static_cast<std::size_t>(v)][static_cast<std::size_t>(c)](i));
        pos.push_back(gt[static_cast<std::size_t>(v)](i) == c);
      }
    CHECK(m.per_class[static_cast<std::size_t>(c)] == doctest::Approx(ap_oracle(s, pos)).epsilon(1e-12));
  }
  CHECK(m.mean == doctest::Approx(0.5 * (m.per_class[0] + m.per_class[1])));

  // Swap class ids 0 and 1 in gt and scores.
  auto sw_gt = gt;
  auto sw_scores = scores;
  for (std::size_t v = 0; v < 2; ++v) {
    for (Eigen::Index i = 0; i < 64; ++i)
      if (sw_gt[v](i) < 2) sw_gt[v](i) = static_cast<std::uint8_t>(1 - sw_gt[v](i));
    std::swap(sw_scores[v][0], sw_scores[v][1]);
  }
  const ClassMetric sw = map_metric(sw_scores, sw_gt, classes);
  CHECK(sw.per_class[0] == m.per_class[1]);
  CHECK(sw.per_class[1] == m.per_class[0]);

  scores[0][1](0, 0) = NAN;
  CHECK_THROWS_AS(map_metric(scores, gt, classes), Error);
}

TEST_CASE("segmenting features labels by cosine and sharpens scores with tau") {
  TextFeatureBank bank;
  bank.labels = {"a", "b", "c"};
  bank.features = Eigen::MatrixXf::Identity(3, 4);
  Eigen::MatrixXf f(4, 6);
  std::mt19937_64 rng(14);
  std::normal_distribution<float> n;
  for (Eigen::Index i = 0; i < f.size(); ++i) f(i) = n(rng);
  const SegmentationResult r = segment_features(f, 2, 3, bank, 0.1);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 3; ++x) {
      const Eigen::VectorXf col = f.col(y * 3 + x);
      Eigen::Vector3d cos;
      for (int c = 0; c < 3; ++c) cos(c) = col(c) / col.norm();
      Eigen::Index best;
      cos.maxCoeff(&best);
      CHECK(r.labels(y, x) == best);
      const Eigen::Vector3d e = (cos / 0.1).array().exp();
      double total = 0;
      for (int c = 0; c < 3; ++c) {
        CHECK(r.scores[static_cast<std::size_t>(c)](y, x) == doctest::Approx(e(c) / e.sum()).epsilon(1e-5));
        total += r.scores[static_cast<std::size_t>(c)](y, x);
      }
      CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
    }
  CHECK_THROWS_AS(segment_features(f, 3, 3, bank, 0.1), Error);
  CHECK_THROWS_AS(segment_features(f, 2, 3, bank, 0.0), Error);
}

TEST_CASE("exported maps read back") {
  const auto dir = std::filesystem::temp_directory_path() / "ov3d_test_eval";
  std::filesystem::remove_all(dir);
  SegmentationResult r;
  r.view_id = "v7";
  r.labels.resize(3, 5);
  r.labels.setConstant(1);
  r.labels(2, 4) = 0;
  for (int c = 0; c < 2; ++c) r.scores.push_back(Plane::Constant(3, 5, 0.25f + 0.5f * c));
  r.scores[0](1, 1) = 0.123456f;
  export_maps(r, {"x", "y"}, dir);
  for (const char* f : {"v7_labels.png", "v7_score_0.png", "v7_score_1.png", "v7_scores.npy", "v7.json"})
    CHECK_MESSAGE(std::filesystem::exists(dir / f), f);
  const SegmentationResult b = import_maps(dir, "v7");
  CHECK((b.labels == r.labels).all());
  REQUIRE(b.classes() == 2);
  for (int c = 0; c < 2; ++c) CHECK((b.scores[static_cast<std::size_t>(c)] == r.scores[static_cast<std::size_t>(c)]).all());
  CHECK_THROWS_AS(export_maps(r, {"x"}, dir), Error);
  std::filesystem::remove_all(dir);
}
