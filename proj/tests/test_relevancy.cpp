#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "ov3d/binary_io.hpp"
#include "ov3d/relevancy.hpp"

using namespace ov3d;

namespace {

TextFeatureBank random_bank(int c, int d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n;
  TextFeatureBank bank;
  bank.features.resize(c, d);
  for (int i = 0; i < c; ++i) {
    bank.labels.push_back("class" + std::to_string(i));
    for (int j = 0; j < d; ++j) bank.features(i, j) = n(rng);
  }
  return bank;
}

MultiScaleFeatureMap random_map(int ns, int d, int h, int w, std::uint64_t seed) {
  std::vector<int> scales;
  for (int s = 0; s < ns; ++s) scales.push_back(16 - 2 * s);
  MultiScaleFeatureMap map("v", scales, d, h, w);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n;
  for (Eigen::Index i = 0; i < map.data.size(); ++i) map.data(i) = n(rng);
  return map;
}

double plain_cos(const Eigen::VectorXd& a, const Eigen::VectorXd& b) { return a.dot(b) / (a.norm() * b.norm()); }

// One class term of the JS integrand in bits, written out directly.
double js_term_oracle(double p, double q) {
  const double m = 0.5 * (p + q);
  double t = 0;
  if (p > 0) t += 0.5 * p * std::log2(p / m);
  if (q > 0) t += 0.5 * q * std::log2(q / m);
  return std::max(t, 0.0);
}

}  // namespace

TEST_CASE("segmentation logits are cosines to the text features") {
  const TextFeatureBank bank = random_bank(4, 6, 1);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n;
  const Eigen::MatrixXd text = bank.features.cast<double>();
  for (int t = 0; t < 20; ++t) {
    Eigen::VectorXd f(6);
    for (int i = 0; i < 6; ++i) f(i) = n(rng);
    bool zero = true;
    const Eigen::VectorXd z = segmentation_logits(f, text, &zero);
    CHECK_FALSE(zero);
    for (int c = 0; c < 4; ++c) CHECK(z(c) == doctest::Approx(plain_cos(text.row(c).transpose(), f)).epsilon(1e-9));
    // Scale invariance, up to the epsilon in the denominator.
    CHECK((segmentation_logits(Eigen::VectorXd(3.5 * f), text) - z).norm() < 1e-9);

    Eigen::VectorXd w(4);
    for (int c = 0; c < 4; ++c) w(c) = n(rng);
    auto loss = [&](const Eigen::VectorXd& x) { return segmentation_logits(x, text).dot(w); };
    CHECK(finite_difference_check(loss, segmentation_logits_backward(f, text, w), f, 1e-6).max_rel_error < 1e-6);
  }
  bool zero = false;
  CHECK(segmentation_logits(Eigen::VectorXd(Eigen::VectorXd::Zero(6)), text, &zero).isZero());
  CHECK(zero);
  CHECK_THROWS_AS(segmentation_logits(Eigen::VectorXd(Eigen::VectorXd::Ones(5)), text), Error);
}

TEST_CASE("class label breaks ties towards the lowest index") {
  Eigen::Vector4d z(0.2, 0.7, 0.7, -1);
  CHECK(class_label(z) == 1);
  CHECK(class_label(Eigen::Vector3d::Zero()) == 0);
  CHECK_THROWS_AS(class_label(Eigen::VectorXd()), Error);
}

TEST_CASE("relevancy is the selection-weighted cosine over scales") {
  const TextFeatureBank bank = random_bank(3, 5, 3);
  const MultiScaleFeatureMap map = random_map(3, 5, 8, 6, 4);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(0, 1);
  for (int ds : {1, 2}) {
    const int rows = 8 / ds, cols = 6 / ds;
    Eigen::MatrixXf sel(3, rows * cols);
    for (int p = 0; p < rows * cols; ++p) {
      for (int s = 0; s < 3; ++s) sel(s, p) = u(rng);
      sel.col(p) /= sel.col(p).sum();
    }
    const RelevancyMap r = relevancy_map(map, sel, bank, ds);
    CHECK(r.height == rows);
    CHECK(r.width == cols);
    for (int y = 0; y < rows; ++y)
      for (int x = 0; x < cols; ++x) {
        const int p = y * cols + x;
        const int py = y * ds + ds / 2, px = x * ds + ds / 2;
        for (int c = 0; c < 3; ++c) {
          double want = 0;
          for (int s = 0; s < 3; ++s)
            want += sel(s, p) * plain_cos(bank.features.row(c).transpose().cast<double>(),
                                          map.feature(s, py, px).cast<double>());
          CHECK(r.raw(c, p) == doctest::Approx(want).epsilon(1e-5));
        }
      }
  }
  Eigen::MatrixXf wrong(2, 48);
  CHECK_THROWS_AS(relevancy_map(map, wrong, bank), Error);
  CHECK_THROWS_AS(relevancy_map(map, Eigen::MatrixXf::Ones(3, 48), random_bank(3, 4, 1)), Error);
}

TEST_CASE("a one-hot selection picks that scale's cosines") {
  const TextFeatureBank bank = random_bank(2, 4, 6);
  const MultiScaleFeatureMap map = random_map(3, 4, 5, 5, 7);
  const auto cos = scale_cosines(map, bank);
  for (int s = 0; s < 3; ++s) {
    Eigen::MatrixXf sel = Eigen::MatrixXf::Zero(3, 25);
    sel.row(s).setOnes();
    CHECK(relevancy_from_cosines(cos, sel, 5, 5).raw == cos[static_cast<std::size_t>(s)]);
  }
}

TEST_CASE("normalization maps each class row onto [0, 1]") {
  RelevancyMap r;
  r.height = 1;
  r.width = 4;
  r.raw.resize(3, 4);
  r.raw << 0.1f, 0.5f, 0.3f, 0.9f,  //
      0.4f, 0.4f, 0.4f, 0.4f,       //
      -1.0f, 1.0f, 0.0f, 0.5f;
  normalize_relevancy(r);
  CHECK(r.normalized(0, 0) == 0.0f);
  CHECK(r.normalized(0, 3) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(r.normalized(0, 1) == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(r.normalized.row(1).isZero());
  CHECK(r.normalized(2, 2) == doctest::Approx(0.5).epsilon(1e-6));
  CHECK((r.normalized.array() >= 0).all());
  CHECK((r.normalized.array() <= 1).all());
}

TEST_CASE("rda loss is the summed JS integrand and its gradient is right") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.02, 1);
  Eigen::MatrixXd probs(4, 5), rel(4, 5);
  for (int r = 0; r < 5; ++r) {
    for (int c = 0; c < 4; ++c) {
      probs(c, r) = u(rng);
      rel(c, r) = u(rng);
    }
    probs.col(r) /= probs.col(r).sum();
  }
  rel(2, 3) = 0;  // clamped target
  double want = 0;
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 4; ++c) want += js_term_oracle(probs(c, r), std::max(rel(c, r), 1e-10));
  Eigen::MatrixXd grad;
  CHECK(rda_loss(probs, rel, &grad) == doctest::Approx(want).epsilon(1e-12));

  const Eigen::VectorXd flat = Eigen::Map<const Eigen::VectorXd>(probs.data(), probs.size());
  const Eigen::VectorXd g = Eigen::Map<const Eigen::VectorXd>(grad.data(), grad.size());
  auto f = [&](const Eigen::VectorXd& v) { return rda_loss(Eigen::MatrixXd(Eigen::Map<const Eigen::MatrixXd>(v.data(), 4, 5)), rel); };
  CHECK(finite_difference_check(f, g, flat, 1e-7).max_rel_error < 1e-5);

  CHECK(rda_loss(rel, rel) < 1e-9);
  CHECK_THROWS_AS(rda_loss(probs, Eigen::MatrixXd(rel.leftCols(4))), Error);
  Eigen::MatrixXd bad = rel;
  bad(0, 0) = 1.5;
  CHECK_THROWS_AS(rda_loss(probs, bad), Error);
}

TEST_CASE("text banks round trip and are validated") {
  const auto dir = std::filesystem::temp_directory_path() / "ov3d_test_relevancy";
  std::filesystem::create_directories(dir);
  TextFeatureBank bank = random_bank(3, 7, 9);
  bank.labels = {"chair", "a red sphere", "background"};
  write_text_bank(bank, dir / "b.ovtb");
  const TextFeatureBank r = read_text_bank(dir / "b.ovtb");
  CHECK(r.labels == bank.labels);
  CHECK(r.features == bank.features);

  TextFeatureBank dup = bank;
  dup.labels[2] = "chair";
  CHECK_THROWS_AS(write_text_bank(dup, dir / "d.ovtb"), Error);
  TextFeatureBank zero = bank;
  zero.features.row(1).setZero();
  CHECK_THROWS_AS(write_text_bank(zero, dir / "z.ovtb"), Error);
  TextFeatureBank short_labels = bank;
  short_labels.labels.pop_back();
  CHECK_THROWS_AS(short_labels.validate(), Error);

  auto bytes = read_file_bytes(dir / "b.ovtb");
  bytes.resize(bytes.size() - 1);
  write_file_bytes(dir / "t.ovtb", bytes);
  try {
    read_text_bank(dir / "t.ovtb");
    FAIL("truncated bank accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Truncated);
  }
  std::filesystem::remove_all(dir);
}
