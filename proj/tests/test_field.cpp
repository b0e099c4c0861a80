#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "ov3d/binary_io.hpp"
#include "ov3d/field.hpp"

using namespace ov3d;

namespace {

FieldConfig small_config() {
  FieldConfig c;
  c.grid = {4, 5, 6};
  c.appearance_channels = 3;
  c.n_scales = 2;
  c.feature_dim = 4;
  c.hidden_width = 6;
  c.hidden_layers = 1;
  c.view_frequencies = 2;
  c.bbox.lo = {-1, -2, -3};
  c.bbox.hi = {1, 2, 3};
  return c;
}

// World position of grid vertex (i, j, k).
Eigen::Vector3d vertex_position(const FieldConfig& c, int i, int j, int k) {
  const Eigen::Array3d idx(i, j, k);
  return (c.bbox.lo.array() + idx / (c.grid.cast<double>() - 1) * c.bbox.extent().array()).matrix();
}

Index flat(const FieldConfig& c, int i, int j, int k) { return (static_cast<Index>(i) * c.grid.y() + j) * c.grid.z() + k; }

FieldModel<double> randomized(const FieldConfig& c, std::uint64_t seed) {
  FieldModel<double> m(c, seed);
  std::mt19937_64 rng(seed + 100);
  std::normal_distribution<double> n(0, 0.5);
  for (auto* p : m.parameters()) {
    for (Index i = 0; i < p->size(); ++i) p->value(i) += n(rng);
  }
  return m;
}

}  // namespace

TEST_CASE("constant density grid gives softplus of the constant") {
  FieldConfig c = small_config();
  c.density_init = 0.0;
  FieldModel<double> m(c, 1);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 50; ++t) {
    const Eigen::Vector3d p = (c.bbox.lo.array() + Eigen::Array3d(u(rng), u(rng), u(rng)) * c.bbox.extent().array()).matrix();
    CHECK(m.query_density(p) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  }
}

TEST_CASE("a grid vertex reads exactly its own value") {
  const FieldConfig c = small_config();
  FieldModel<double> m = randomized(c, 2);
  for (int i : {0, 1, 3})
    for (int j : {0, 2, 4})
      for (int k : {0, 5}) {
        const double raw = m.density.value(flat(c, i, j, k));
        CHECK(m.query_density(vertex_position(c, i, j, k)) == doctest::Approx(softplus(raw)).epsilon(1e-12));
      }
}

TEST_CASE("trilinear interpolation reproduces affine functions") {
  const FieldConfig c = small_config();
  FieldModel<double> m(c, 3);
  const Eigen::Vector3d a(0.3, -0.7, 0.2);
  const double b = 0.1;
  for (int i = 0; i < c.grid.x(); ++i)
    for (int j = 0; j < c.grid.y(); ++j)
      for (int k = 0; k < c.grid.z(); ++k) m.density.value(flat(c, i, j, k)) = a.dot(vertex_position(c, i, j, k)) + b;
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 100; ++t) {
    const Eigen::Vector3d p = (c.bbox.lo.array() + Eigen::Array3d(u(rng), u(rng), u(rng)) * c.bbox.extent().array()).matrix();
    const auto s = m.stencil(p);
    double wsum = 0;
    for (double w : s.weight) {
      CHECK(w >= 0);
      wsum += w;
    }
    CHECK(wsum == doctest::Approx(1.0).epsilon(1e-14));
    double raw = 0;
    m.interpolate(m.density, 1, s, &raw);
    CHECK(raw == doctest::Approx(a.dot(p) + b).epsilon(1e-12));
  }
}

TEST_CASE("everything is zero outside the box") {
  const FieldConfig c = small_config();
  FieldModel<double> m = randomized(c, 5);
  const Eigen::Vector3d out(1.5, 0, 0);
  CHECK(m.query_density(out) == 0.0);
  CHECK(m.query_selection_logits(out).isZero());
  CHECK(m.query_feature(out).isZero());
  CHECK(m.query_rgb(out, Eigen::Vector3d::UnitZ()).isZero());
  CHECK_FALSE(m.stencil(Eigen::Vector3d(std::nan(""), 0, 0)).inside);
}

TEST_CASE("rgb query needs a unit direction and stays in [0, 1]") {
  const FieldConfig c = small_config();
  FieldModel<double> m = randomized(c, 6);
  CHECK_THROWS_AS(m.query_rgb(Eigen::Vector3d::Zero(), std::nullopt), Error);
  CHECK_THROWS_AS(m.query_rgb(Eigen::Vector3d::Zero(), Eigen::Vector3d(0, 0, 2)), Error);
  const auto rgb = m.query_rgb(Eigen::Vector3d(0.1, 0.2, 0.3), Eigen::Vector3d(0, 0.6, 0.8));
  CHECK((rgb.array() > 0).all());
  CHECK((rgb.array() < 1).all());
}

TEST_CASE("direction encoding layout") {
  const Eigen::Vector3d d(0.6, 0, 0.8);
  const auto e = encode_direction<double>(d, 2);
  REQUIRE(e.size() == encoded_direction_dim(2));
  CHECK(e(0) == 0.6);
  CHECK(e(3) == doctest::Approx(std::sin(0.6)));
  CHECK(e(6) == doctest::Approx(std::cos(0.6)));
  CHECK(e(9) == doctest::Approx(std::sin(1.2)));
  CHECK(e(14) == doctest::Approx(std::cos(1.6)));
}

TEST_CASE("parameter groups partition the tensors") {
  FieldModel<double> m(small_config(), 7);
  const auto all = m.parameters();
  std::size_t total = 0;
  for (ParamGroup g : {ParamGroup::Shared, ParamGroup::Density, ParamGroup::Selection, ParamGroup::RgbHead,
                       ParamGroup::FeatureHead}) {
    const auto some = m.parameters(static_cast<GroupMask>(g));
    CHECK(!some.empty());
    for (auto* p : some) CHECK(m.group_of(*p) == g);
    total += some.size();
  }
  CHECK(total == all.size());
  CHECK(m.parameters(0).empty());
}

TEST_CASE("mlp backward matches finite differences") {
  Mlp<double> mlp("m", 3, 5, 2, 2);
  mlp.initialize(11);
  Eigen::MatrixXd x(3, 4);
  x << 0.3, -0.2, 0.9, 0.1, 0.5, 0.7, -0.4, 0.2, -0.6, 0.8, 0.3, -0.9;
  Eigen::MatrixXd w(2, 4);
  w << 0.2, -0.5, 0.3, 1.0, 0.7, 0.1, -0.8, 0.4;
  Mlp<double>::Cache cache;
  mlp.forward(x, &cache);
  const Eigen::MatrixXd dx = mlp.backward(cache, w, true, true);
  auto loss_of_input = [&](const Eigen::VectorXd& v) {
    return (mlp.forward(Eigen::Map<const Eigen::MatrixXd>(v.data(), 3, 4)).cwiseProduct(w)).sum();
  };
  const Eigen::VectorXd xv = Eigen::Map<const Eigen::VectorXd>(x.data(), x.size());
  const Eigen::VectorXd dxv = Eigen::Map<const Eigen::VectorXd>(dx.data(), dx.size());
  CHECK(finite_difference_check(loss_of_input, dxv, xv, 1e-6).max_rel_error < 1e-6);

  for (auto& p : mlp.params()) {
    const Eigen::VectorXd g = p.grad;
    const Eigen::VectorXd v0 = p.value;
    auto loss_of_param = [&](const Eigen::VectorXd& v) {
      p.value = v;
      const double l = (mlp.forward(x).cwiseProduct(w)).sum();
      p.value = v0;
      return l;
    };
    CHECK(finite_difference_check(loss_of_param, g, v0, 1e-6).max_rel_error < 1e-6);
  }
}

TEST_CASE("mlp forward does not depend on the batch split") {
  Mlp<float> mlp("m", 4, 8, 2, 3);
  mlp.initialize(12);
  Eigen::MatrixXf x = Eigen::MatrixXf::Random(4, 600);
  const Eigen::MatrixXf all = mlp.forward(x);
  for (Index c : {0, 255, 256, 599}) CHECK(all.col(c) == mlp.forward(x.col(c)).col(0));
}

TEST_CASE("pack and unpack are inverse") {
  FieldModel<double> m = randomized(small_config(), 8);
  const GroupMask mask = ParamGroup::Selection | ParamGroup::RgbHead;
  Eigen::VectorXd v = pack_values(m, mask);
  v.array() += 1.0;
  unpack_values(m, v, mask);
  CHECK(pack_values(m, mask) == v);
  CHECK_THROWS_AS(unpack_values(m, Eigen::VectorXd(v.head(v.size() - 1)), mask), Error);
}

TEST_CASE("checkpoint round trip and corruption") {
  const auto dir = std::filesystem::temp_directory_path() / "ov3d_test_field";
  std::filesystem::create_directories(dir);
  FieldConfig c = small_config();
  FieldModel<float> m(c, 9);
  m.density.value.setRandom();
  save_checkpoint(m, dir / "a.ckpt");
  const FieldModel<float> r = load_checkpoint(dir / "a.ckpt");
  CHECK(r.config().grid.isApprox(c.grid));
  CHECK(r.config().n_scales == c.n_scales);
  CHECK(r.config().feature_dim == c.feature_dim);
  CHECK(r.config().view_frequencies == c.view_frequencies);
  const auto a = m.parameters();
  const auto b = r.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i]->name == b[i]->name);
    CHECK(a[i]->value == b[i]->value);
  }
  CHECK(r.query_density(Eigen::Vector3d(0.2, 0.1, -0.4)) == m.query_density(Eigen::Vector3d(0.2, 0.1, -0.4)));

  auto bytes = read_file_bytes(dir / "a.ckpt");
  auto bad = bytes;
  bad[0] = 'X';
  write_file_bytes(dir / "bad.ckpt", bad);
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), Error);
  bad = bytes;
  bad[4] = 9;
  write_file_bytes(dir / "ver.ckpt", bad);
  try {
    load_checkpoint(dir / "ver.ckpt");
    FAIL("version accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::VersionMismatch);
  }
  bad.assign(bytes.begin(), bytes.end() - 7);
  write_file_bytes(dir / "short.ckpt", bad);
  try {
    load_checkpoint(dir / "short.ckpt");
    FAIL("truncated file accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Truncated);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("invalid configurations are rejected") {
  FieldConfig c = small_config();
  c.grid = {1, 4, 4};
  CHECK_THROWS_AS(FieldModel<float>(c, 0), Error);
  c = small_config();
  c.bbox.hi.x() = c.bbox.lo.x();
  CHECK_THROWS_AS(FieldModel<float>(c, 0), Error);
}

TEST_CASE("resetting the feature branch resizes selection and feature head") {
  FieldModel<float> m(small_config(), 10);
  const Eigen::VectorXf density = m.density.value;
  m.reset_feature_branch(5, 9, 3);
  CHECK(m.config().n_scales == 5);
  CHECK(m.selection.size() == m.cell_count() * 5);
  CHECK(m.query_feature(Eigen::Vector3d::Zero()).size() == 9);
  CHECK(m.density.value == density);
}
