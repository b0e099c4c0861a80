#include <doctest.h>

#include <cmath>
#include <random>

#include "ov3d/renderer.hpp"

using namespace ov3d;

namespace {

FieldConfig small_config() {
  FieldConfig c;
  c.grid = {5, 5, 5};
  c.appearance_channels = 3;
  c.n_scales = 3;
  c.feature_dim = 4;
  c.hidden_width = 6;
  c.hidden_layers = 1;
  c.view_frequencies = 1;
  c.bbox.lo = {-1, -1, -1};
  c.bbox.hi = {1, 1, 1};
  return c;
}

FieldModel<double> randomized(const FieldConfig& c, std::uint64_t seed, double density_mean = 0.5) {
  FieldModel<double> m(c, seed);
  std::mt19937_64 rng(seed + 50);
  std::normal_distribution<double> n(0, 0.7);
  for (auto* p : m.parameters()) {
    for (Index i = 0; i < p->size(); ++i) p->value(i) += n(rng);
  }
  m.density.value.array() += density_mean;
  return m;
}

Ray random_ray(std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  std::uniform_real_distribution<double> u(-0.8, 0.8);
  Ray r;
  r.direction = Eigen::Vector3d(n(rng), n(rng), n(rng)).normalized();
  const Eigen::Vector3d through(u(rng), u(rng), u(rng));
  r.origin = through - 2.0 * r.direction;
  r.near = 0.5;
  r.far = 3.5;
  return r;
}

Camera test_camera() {
  Camera cam;
  cam.c2w.col(3) = Eigen::Vector3d(0, 0, 3);
  cam.width = 12;
  cam.height = 10;
  cam.focal = 14;
  cam.near = 1;
  cam.far = 5;
  return cam;
}

// Straight per-sample compositing through the public point queries.
struct Composite {
  Eigen::Vector3d color = Eigen::Vector3d::Zero();
  Eigen::VectorXd feature;
  Eigen::VectorXd selection_acc;
  double tail = 1;
  double weight_sum = 0;
};

Composite oracle(const FieldModel<double>& m, const Ray& ray, int n) {
  Composite out;
  out.feature = Eigen::VectorXd::Zero(m.config().feature_dim);
  out.selection_acc = Eigen::VectorXd::Zero(m.config().n_scales);
  const double width = (ray.far - ray.near) / n;
  double t = 1;
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector3d p = ray.origin + (ray.near + (i + 0.5) * width) * ray.direction;
    const double alpha = 1 - std::exp(-width * m.query_density(p));
    const double w = t * alpha;
    out.color += w * m.query_rgb(p, ray.direction);
    out.feature += w * m.query_feature(p);
    out.selection_acc += w * m.query_selection_logits(p);
    out.weight_sum += w;
    t *= 1 - alpha;
  }
  out.tail = t;
  return out;
}

}  // namespace

TEST_CASE("deterministic samples sit at bin centres and tile [near, far]") {
  Ray r;
  r.near = 2;
  r.far = 6;
  const RaySamples s = sample_points(r, 4);
  CHECK(s.t(0) == doctest::Approx(2.5));
  CHECK(s.t(3) == doctest::Approx(5.5));
  CHECK(s.delta.sum() == doctest::Approx(4.0));
  const RaySamples one = sample_points(r, 1);
  CHECK(one.t(0) == doctest::Approx(4.0));
  CHECK(one.delta(0) == doctest::Approx(4.0));
  CHECK_THROWS_AS(sample_points(r, 0), Error);
  CHECK_THROWS_AS(sample_points(r, 3, true, nullptr), Error);
}

TEST_CASE("stratified samples stay inside their bins and are sorted") {
  std::mt19937_64 rng(1);
  Ray r;
  r.near = 0.5;
  r.far = 2.5;
  for (int trial = 0; trial < 50; ++trial) {
    const RaySamples s = sample_points(r, 8, true, &rng);
    for (int i = 0; i < 8; ++i) {
      CHECK(s.t(i) >= r.near + i * 0.25);
      CHECK(s.t(i) <= r.near + (i + 1) * 0.25);
      if (i > 0) CHECK(s.t(i) > s.t(i - 1));
    }
  }
}

TEST_CASE("camera rays follow the pinhole convention") {
  const Camera cam = test_camera();
  const Ray centre = camera_ray(cam, 6, 5);
  CHECK(centre.direction.isApprox(-Eigen::Vector3d::UnitZ()));
  CHECK(centre.origin.isApprox(Eigen::Vector3d(0, 0, 3)));
  // Right of centre points +x, below centre points -y.
  const Ray right = camera_ray(cam, 6 + 14, 5);
  CHECK(right.direction.isApprox(Eigen::Vector3d(1, 0, -1).normalized()));
  const Ray below = camera_ray(cam, 6, 5 + 14);
  CHECK(below.direction.isApprox(Eigen::Vector3d(0, -1, -1).normalized()));

  // Downsampled cells go through cell centres.
  const std::vector<PixelIndex> px{{1, 2}};
  const auto rays = generate_rays(cam, px, 2);
  CHECK(rays[0].direction.isApprox(camera_ray(cam, 3, 5).direction));
  const std::vector<PixelIndex> outside{{6, 0}};
  CHECK_THROWS_AS(generate_rays(cam, outside, 2), Error);
  CHECK(generate_view_rays(cam, 3).size() == 4u * 3u);

  Camera singular = cam;
  singular.c2w.col(0).setZero();
  CHECK_THROWS_AS(camera_ray(singular, 0, 0), Error);
}

TEST_CASE("clipping narrows the ray to the box") {
  const Camera cam = test_camera();
  Aabb box;
  box.lo = {-1, -1, -1};
  box.hi = {1, 1, 1};
  const Ray r = camera_ray(cam, 6, 5, &box);
  CHECK(r.near == doctest::Approx(2.0));
  CHECK(r.far == doctest::Approx(4.0));
  // A miss keeps the camera range.
  Aabb away;
  away.lo = {10, 10, 10};
  away.hi = {11, 11, 11};
  const Ray m = camera_ray(cam, 6, 5, &away);
  CHECK(m.near == cam.near);
  CHECK(m.far == cam.far);
}

TEST_CASE("weights and transmittance conserve energy") {
  const FieldConfig c = small_config();
  std::mt19937_64 rng(2);
  for (double mean : {-3.0, 0.5, 4.0}) {
    const FieldModel<double> m = randomized(c, 3, mean);
    for (int trial = 0; trial < 100; ++trial) {
      const Ray ray = random_ray(rng);
      const auto out = render_ray(m, ray, 32);
      CHECK((out.weights.array() >= 0).all());
      CHECK(out.weights.sum() + out.transmittance_tail == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(out.transmittance_tail >= 0);
      CHECK(out.transmittance_tail <= 1);
      CHECK(std::abs(out.selection.sum() - 1) < 1e-12);
    }
  }
}

TEST_CASE("batched rendering matches the per-sample compositing oracle") {
  const FieldConfig c = small_config();
  const FieldModel<double> m = randomized(c, 4);
  std::mt19937_64 rng(5);
  std::vector<Ray> rays;
  for (int i = 0; i < 40; ++i) rays.push_back(random_ray(rng));
  RenderOptions opt;
  opt.n_samples = 24;
  const RenderBatch<double> batch(m, rays, opt);
  for (std::size_t r = 0; r < rays.size(); ++r) {
    const Composite o = oracle(m, rays[r], 24);
    const Index i = static_cast<Index>(r);
    CHECK((batch.color().col(i) - o.color).norm() < 1e-12);
    CHECK((batch.feature().col(i) - o.feature).norm() < 1e-12);
    CHECK((batch.selection().col(i) - softmax(Eigen::VectorXd(o.selection_acc))).norm() < 1e-12);
    CHECK(batch.transmittance_tail()(i) == doctest::Approx(o.tail).epsilon(1e-12));
  }
}

TEST_CASE("an empty field renders nothing and an opaque wall stops the ray") {
  FieldConfig c = small_config();
  c.density_init = -40;
  FieldModel<double> empty(c, 6);
  Ray ray;
  ray.origin = {0, 0, 3};
  ray.near = 1;
  ray.far = 5;
  auto out = render_ray(empty, ray, 16);
  CHECK(out.color.norm() < 1e-12);
  CHECK(out.transmittance_tail == doctest::Approx(1.0));

  c.density_init = 60;
  FieldModel<double> wall(c, 6);
  out = render_ray(wall, ray, 16);
  CHECK(out.transmittance_tail < 1e-12);
  CHECK(out.weights(4) == doctest::Approx(1.0));
}

TEST_CASE("render_view equals rays rendered one by one") {
  const FieldConfig c = small_config();
  const FieldModel<double> m = randomized(c, 7);
  const Camera cam = test_camera();
  RenderOptions opt;
  opt.n_samples = 20;
  const ViewRender<double> view = render_view(m, cam, 2, opt, 7);
  CHECK(view.rows == 5);
  CHECK(view.cols == 6);
  const auto rays = generate_view_rays(cam, 2, &c.bbox);
  for (Index p = 0; p < view.rows * view.cols; ++p) {
    const auto one = render_ray(m, rays[static_cast<std::size_t>(p)], 20);
    CHECK(view.color.col(p) == one.color);
    CHECK(view.feature.col(p) == one.feature);
    CHECK(view.transmittance_tail(p) == one.transmittance_tail);
  }
  opt.stratified = true;
  CHECK_THROWS_AS(render_view(m, cam, 2, opt), Error);
}

TEST_CASE("render backward matches finite differences for every group") {
  const FieldConfig c = small_config();
  FieldModel<double> m = randomized(c, 8);
  std::mt19937_64 rng(9);
  std::vector<Ray> rays;
  for (int i = 0; i < 6; ++i) rays.push_back(random_ray(rng));
  RenderOptions opt;
  opt.n_samples = 12;
  std::normal_distribution<double> n;
  Eigen::MatrixXd wc(3, 6), wf(c.feature_dim, 6), ws(c.n_scales, 6);
  for (Index i = 0; i < wc.size(); ++i) wc(i) = n(rng);
  for (Index i = 0; i < wf.size(); ++i) wf(i) = n(rng);
  for (Index i = 0; i < ws.size(); ++i) ws(i) = n(rng);
  auto loss = [&]() {
    const RenderBatch<double> b(m, rays, opt);
    return b.color().cwiseProduct(wc).sum() + b.feature().cwiseProduct(wf).sum() + b.selection().cwiseProduct(ws).sum();
  };

  m.zero_grad();
  const RenderBatch<double> b(m, rays, opt);
  b.backward(m, kAllGroups, &wc, &wf, &ws);
  for (auto* p : m.parameters()) {
    const Eigen::VectorXd g = p->grad;
    const Eigen::VectorXd v0 = p->value;
    auto f = [&](const Eigen::VectorXd& v) {
      p->value = v;
      const double l = loss();
      p->value = v0;
      return l;
    };
    INFO(p->name);
    CHECK(finite_difference_check(f, g, v0, 1e-5).max_rel_error < 1e-5);
  }
}

TEST_CASE("backward only touches the requested groups") {
  const FieldConfig c = small_config();
  FieldModel<double> m = randomized(c, 10);
  std::mt19937_64 rng(11);
  std::vector<Ray> rays{random_ray(rng), random_ray(rng)};
  RenderOptions opt;
  opt.n_samples = 8;
  const Eigen::MatrixXd ws = Eigen::MatrixXd::Ones(c.n_scales, 2);
  m.zero_grad();
  const RenderBatch<double> b(m, rays, opt);
  b.backward(m, static_cast<GroupMask>(ParamGroup::Selection), nullptr, nullptr, &ws);
  for (auto* p : m.parameters()) {
    if (m.group_of(*p) != ParamGroup::Selection) CHECK(p->grad.isZero());
  }
  FieldModel<double> other = randomized(c, 10);
  CHECK_THROWS_AS(b.backward(other, kAllGroups, nullptr, nullptr, &ws), Error);
}
