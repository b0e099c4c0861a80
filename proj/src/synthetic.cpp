#include "ov3d/synthetic.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>

#include <json.hpp>

#include "ov3d/error.hpp"

namespace ov3d {

using nlohmann::json;

std::uint64_t stable_hash(const std::string& text, std::uint64_t seed) {
  std::uint64_t h = 1469598103934665603ull ^ (seed * 0x9e3779b97f4a7c15ull);
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

SyntheticSpec SyntheticSpec::standard() {
  // World units are chosen so an opaque surface needs only a moderate
  // density (softplus of a single-digit grid value) at the bin widths used.
  constexpr double u = 10.0;
  SyntheticSpec s;
  s.camera_radius = {0.5 * u, 0.3 * u};
  s.look_at = {0, 0, -3 * u};
  s.background_depth = -4 * u;
  s.checker_size = 0.4 * u;
  SyntheticObject ball;
  ball.label = "red ball";
  ball.shape = SyntheticObject::Shape::Sphere;
  ball.center = Eigen::Vector3d(-0.55, 0.15, -2.9) * u;
  ball.size = Eigen::Vector3d::Constant(0.5 * u);
  ball.color = {0.85, 0.15, 0.12};
  SyntheticObject box;
  box.label = "green box";
  box.shape = SyntheticObject::Shape::Box;
  box.center = Eigen::Vector3d(0.6, -0.15, -3.05) * u;
  box.size = Eigen::Vector3d(0.4, 0.45, 0.4) * u;
  box.color = {0.15, 0.7, 0.2};
  s.objects = {ball, box};
  s.bbox.lo = Eigen::Vector3d(-2.4, -2.4, -4.3) * u;
  s.bbox.hi = Eigen::Vector3d(2.4, 2.4, -2.0) * u;
  return s;
}

std::vector<std::string> SyntheticSpec::labels() const {
  std::vector<std::string> out{background_label};
  for (const auto& o : objects) out.push_back(o.label);
  return out;
}

namespace {

json vec_json(const Eigen::Vector3d& v) { return json::array({v.x(), v.y(), v.z()}); }
Eigen::Vector3d vec_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

void validate(const SyntheticSpec& s) {
  auto bad = [](const std::string& what) { fail(ErrorCode::InvalidArgument, "synthetic spec: " + what); };
  if (s.image_size < 16) bad("image_size must be >= 16");
  if (s.views < 2) bad("need at least 2 views");
  for (int h : s.held_out)
    if (h < 0 || h >= s.views) bad("held-out view " + std::to_string(h) + " out of range");
  if (static_cast<int>(s.held_out.size()) >= s.views) bad("every view is held out");
  if (!(s.fov_degrees > 1 && s.fov_degrees < 170)) bad("fov_degrees outside (1, 170)");
  if (!(s.checker_size > 0)) bad("checker_size must be positive");
  if (s.feature_dim < 2) bad("feature_dim must be >= 2");
  if (s.noise_sigma < 0 || s.dino_noise < 0) bad("noise must be >= 0");
  if (s.dino_stride < 1 || s.dino_stride > s.image_size / 2) bad("dino_stride out of range");
  if (!(s.max_prototype_cosine > 0 && s.max_prototype_cosine < 1)) bad("max_prototype_cosine must be in (0, 1)");
  if (!((s.bbox.hi - s.bbox.lo).array() > 0).all()) bad("empty bbox");
  if (s.classes() > 254) bad("too many objects");
  for (const auto& o : s.objects) {
    if (!(o.size.array() > 0).all()) bad("object '" + o.label + "' has non-positive size");
    if (o.label.empty()) bad("object without label");
  }
  auto labels = s.labels();
  std::sort(labels.begin(), labels.end());
  if (std::adjacent_find(labels.begin(), labels.end()) != labels.end()) bad("duplicate labels");
}

Eigen::Matrix<double, 3, 4> look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target) {
  const Eigen::Vector3d forward = (target - eye).normalized();
  const Eigen::Vector3d right = forward.cross(Eigen::Vector3d::UnitY()).normalized();
  const Eigen::Vector3d up = right.cross(forward);
  Eigen::Matrix<double, 3, 4> m;
  m << right, up, -forward, eye;
  return m;
}

// Nearest positive hit along the ray; fills the outward normal.
double hit_object(const SyntheticObject& o, const Ray& ray, Eigen::Vector3d& normal) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  const Eigen::Vector3d d = ray.direction.normalized();
  const double scale = ray.direction.norm();
  if (o.shape == SyntheticObject::Shape::Sphere) {
    const Eigen::Vector3d oc = ray.origin - o.center;
    const double r = o.size.x();
    const double b = oc.dot(d);
    const double disc = b * b - (oc.squaredNorm() - r * r);
    if (disc < 0) return kInf;
    const double t = -b - std::sqrt(disc);
    if (t <= 0) return kInf;
    normal = (ray.origin + t * d - o.center) / r;
    return t / scale;
  }
  double t0 = -kInf, t1 = kInf;
  int axis = 0;
  for (int a = 0; a < 3; ++a) {
    const double lo = o.center(a) - o.size(a), hi = o.center(a) + o.size(a);
    if (std::abs(d(a)) < 1e-15) {
      if (ray.origin(a) < lo || ray.origin(a) > hi) return kInf;
      continue;
    }
    double ta = (lo - ray.origin(a)) / d(a), tb = (hi - ray.origin(a)) / d(a);
    if (ta > tb) std::swap(ta, tb);
    if (ta > t0) {
      t0 = ta;
      axis = a;
    }
    t1 = std::min(t1, tb);
  }
  if (t0 > t1 || t0 <= 0) return kInf;
  normal = Eigen::Vector3d::Zero();
  normal(axis) = d(axis) > 0 ? -1 : 1;
  return t0 / scale;
}

Eigen::Vector3d shade(const Eigen::Vector3d& albedo, const Eigen::Vector3d& normal) {
  const Eigen::Vector3d light = Eigen::Vector3d(0.35, 0.5, 1.0).normalized();
  return albedo * (0.35 + 0.65 * std::max(0.0, normal.dot(light)));
}

}  // namespace

std::string spec_to_json(const SyntheticSpec& s) {
  json j;
  j["image_size"] = s.image_size;
  j["views"] = s.views;
  j["held_out"] = s.held_out;
  j["fov_degrees"] = s.fov_degrees;
  j["camera_radius"] = {s.camera_radius.x(), s.camera_radius.y()};
  j["look_at"] = vec_json(s.look_at);
  j["background_label"] = s.background_label;
  j["background_color"] = vec_json(s.background_color);
  j["background_depth"] = s.background_depth;
  j["checker_size"] = s.checker_size;
  j["bbox"] = {{"lo", vec_json(s.bbox.lo)}, {"hi", vec_json(s.bbox.hi)}};
  j["feature_dim"] = s.feature_dim;
  j["noise_sigma"] = s.noise_sigma;
  j["dino_noise"] = s.dino_noise;
  j["dino_stride"] = s.dino_stride;
  j["max_prototype_cosine"] = s.max_prototype_cosine;
  j["seed"] = s.seed;
  j["objects"] = json::array();
  for (const auto& o : s.objects) {
    j["objects"].push_back({{"label", o.label},
                            {"shape", o.shape == SyntheticObject::Shape::Sphere ? "sphere" : "box"},
                            {"center", vec_json(o.center)},
                            {"size", vec_json(o.size)},
                            {"color", vec_json(o.color)}});
  }
  return j.dump(2);
}

SyntheticSpec spec_from_json(const std::string& text) {
  // Missing keys keep the standard layout.
  SyntheticSpec s = SyntheticSpec::standard();
  try {
    const json j = json::parse(text);
    s.image_size = j.value("image_size", s.image_size);
    s.views = j.value("views", s.views);
    if (j.contains("held_out")) s.held_out = j.at("held_out").get<std::vector<int>>();
    s.fov_degrees = j.value("fov_degrees", s.fov_degrees);
    if (j.contains("camera_radius")) {
      s.camera_radius = {j.at("camera_radius").at(0).get<double>(), j.at("camera_radius").at(1).get<double>()};
    }
    if (j.contains("look_at")) s.look_at = vec_from(j.at("look_at"));
    s.background_label = j.value("background_label", s.background_label);
    if (j.contains("background_color")) s.background_color = vec_from(j.at("background_color"));
    s.background_depth = j.value("background_depth", s.background_depth);
    s.checker_size = j.value("checker_size", s.checker_size);
    if (j.contains("bbox")) {
      s.bbox.lo = vec_from(j.at("bbox").at("lo"));
      s.bbox.hi = vec_from(j.at("bbox").at("hi"));
    }
    s.feature_dim = j.value("feature_dim", s.feature_dim);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    s.dino_noise = j.value("dino_noise", s.dino_noise);
    s.dino_stride = j.value("dino_stride", s.dino_stride);
    s.max_prototype_cosine = j.value("max_prototype_cosine", s.max_prototype_cosine);
    s.seed = j.value("seed", s.seed);
    if (j.contains("objects")) {
      s.objects.clear();
      for (const auto& jo : j.at("objects")) {
        SyntheticObject o;
        o.label = jo.at("label").get<std::string>();
        const std::string shape = jo.value("shape", std::string("sphere"));
        if (shape == "sphere") {
          o.shape = SyntheticObject::Shape::Sphere;
        } else if (shape == "box") {
          o.shape = SyntheticObject::Shape::Box;
        } else {
          fail(ErrorCode::Format, "synthetic spec: unknown shape '" + shape + "'");
        }
        o.center = vec_from(jo.at("center"));
        if (jo.at("size").is_number()) {
          o.size = Eigen::Vector3d::Constant(jo.at("size").get<double>());
        } else {
          o.size = vec_from(jo.at("size"));
        }
        o.color = vec_from(jo.at("color"));
        s.objects.push_back(o);
      }
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::Format, std::string("synthetic spec: ") + e.what());
  }
  validate(s);
  return s;
}

Eigen::MatrixXf synthetic_prototypes(const SyntheticSpec& spec) {
  validate(spec);
  const int c = spec.classes(), d = spec.feature_dim;
  std::mt19937_64 rng(stable_hash("prototypes", spec.seed));
  std::normal_distribution<double> normal;
  Eigen::MatrixXd p(c, d);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    for (int i = 0; i < c; ++i) {
      for (int k = 0; k < d; ++k) p(i, k) = normal(rng);
      p.row(i).normalize();
    }
    const Eigen::MatrixXd gram = p * p.transpose();
    bool ok = true;
    for (int i = 0; i < c && ok; ++i)
      for (int j = i + 1; j < c && ok; ++j) ok = std::abs(gram(i, j)) < spec.max_prototype_cosine;
    if (ok) return p.cast<float>();
  }
  fail(ErrorCode::InvalidArgument, "synthetic spec: could not draw non-parallel prototypes; raise feature_dim");
}

int synthetic_class_at(const SyntheticSpec& spec, const Ray& ray, Eigen::Vector3d* color) {
  double best = std::numeric_limits<double>::infinity();
  int cls = 0;
  Eigen::Vector3d normal;
  Eigen::Vector3d best_normal = Eigen::Vector3d::UnitZ();
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    const double t = hit_object(spec.objects[i], ray, normal);
    if (t < best) {
      best = t;
      cls = static_cast<int>(i) + 1;
      best_normal = normal;
    }
  }
  if (color) {
    if (cls > 0) {
      *color = shade(spec.objects[static_cast<std::size_t>(cls - 1)].color, best_normal);
    } else {
      // Plane z = background_depth with a faint checker so depth is recoverable.
      Eigen::Vector3d albedo = spec.background_color;
      if (std::abs(ray.direction.z()) > 1e-12) {
        const double t = (spec.background_depth - ray.origin.z()) / ray.direction.z();
        const Eigen::Vector3d p = ray.origin + t * ray.direction;
        const long cell = std::lround(std::floor(p.x() / spec.checker_size)) + std::lround(std::floor(p.y() / spec.checker_size));
        if (cell % 2 != 0) albedo *= 0.8;
      }
      *color = shade(albedo, Eigen::Vector3d::UnitZ());
    }
  }
  return cls;
}

SyntheticClipEncoder::SyntheticClipEncoder(Eigen::MatrixXf prototypes, std::map<std::string, LabelMap> masks,
                                           double noise_sigma, std::uint64_t seed)
    : prototypes_(std::move(prototypes)), masks_(std::move(masks)), sigma_(noise_sigma), seed_(seed) {}

Eigen::VectorXf SyntheticClipEncoder::encode(const Image& image, const CropRect& rect) {
  const auto it = masks_.find(image.id);
  if (it == masks_.end()) fail(ErrorCode::InvalidArgument, "synthetic encoder: no mask for image '" + image.id + "'");
  const LabelMap& mask = it->second;
  require(rect.left >= 0 && rect.upper >= 0 && rect.right <= mask.cols() && rect.lower <= mask.rows() &&
              rect.width() > 0 && rect.height() > 0,
          ErrorCode::OutOfRange, "synthetic encoder: crop outside the image");
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(prototypes_.rows());
  for (int y = rect.upper; y < rect.lower; ++y) {
    for (int x = rect.left; x < rect.right; ++x) {
      const int c = mask(y, x);
      if (c < counts.size()) counts(c) += 1;
    }
  }
  const double area = counts.sum();
  Eigen::VectorXd f = Eigen::VectorXd::Zero(prototypes_.cols());
  if (area > 0) f = prototypes_.cast<double>().transpose() * (counts / area);
  if (sigma_ > 0) {
    std::mt19937_64 rng(stable_hash(image.id + ":" + to_string(rect), seed_));
    std::normal_distribution<double> normal(0.0, sigma_);
    for (Eigen::Index k = 0; k < f.size(); ++k) f(k) += normal(rng);
  }
  return f.cast<float>();
}

DinoMap synthetic_dino(const LabelMap& mask, int classes, int stride, double noise, std::uint64_t seed,
                       const std::string& view_id) {
  require(stride >= 1 && classes >= 1, ErrorCode::InvalidArgument, "synthetic_dino: bad arguments");
  DinoMap m;
  m.view_id = view_id;
  m.dim = classes;
  m.height = static_cast<int>(mask.rows()) / stride;
  m.width = static_cast<int>(mask.cols()) / stride;
  m.stride = stride;
  m.data = Eigen::VectorXf::Zero(static_cast<Eigen::Index>(m.dim) * m.height * m.width);
  std::mt19937_64 rng(stable_hash("dino:" + view_id, seed));
  std::normal_distribution<double> normal(0.0, noise);
  const Eigen::Index plane = static_cast<Eigen::Index>(m.height) * m.width;
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      const int c = mask(y * stride + stride / 2, x * stride + stride / 2);
      for (int d = 0; d < m.dim; ++d) {
        const double v = (d == c ? 1.0 : 0.0) + (noise > 0 ? normal(rng) : 0.0);
        m.data(d * plane + static_cast<Eigen::Index>(y) * m.width + x) = static_cast<float>(v);
      }
    }
  }
  return m;
}

SyntheticClipEncoder SyntheticScene::encoder() const {
  std::map<std::string, LabelMap> masks;
  for (const auto& v : scene.views)
    if (v.mask) masks.emplace(v.id, *v.mask);
  return SyntheticClipEncoder(prototypes, std::move(masks), spec.noise_sigma, stable_hash("clip", spec.seed));
}

SyntheticScene make_synthetic_scene(const SyntheticSpec& spec) {
  validate(spec);
  SyntheticScene out;
  out.spec = spec;
  out.prototypes = synthetic_prototypes(spec);
  out.bank.labels = spec.labels();
  out.bank.features = out.prototypes;
  out.scene.labels = spec.labels();
  out.scene.bbox = spec.bbox;

  const int n = spec.image_size;
  const double focal = 0.5 * n / std::tan(0.5 * spec.fov_degrees * std::numbers::pi / 180.0);
  for (int v = 0; v < spec.views; ++v) {
    const double theta = 2.0 * std::numbers::pi * v / spec.views;
    const bool held = std::find(spec.held_out.begin(), spec.held_out.end(), v) != spec.held_out.end();
    // Held-out cameras sit halfway to the centre so they interpolate the training poses.
    const double r = held ? 0.5 : 1.0;
    const Eigen::Vector3d eye(r * spec.camera_radius.x() * std::cos(theta),
                              r * spec.camera_radius.y() * std::sin(theta), 0.0);
    View view;
    char name[32];
    std::snprintf(name, sizeof(name), "view_%03d", v);
    view.id = name;
    view.camera.c2w = look_at(eye, spec.look_at);
    view.camera.height = n;
    view.camera.width = n;
    view.camera.focal = focal;
    view.camera.near = 0.1 * (spec.bbox.hi.z() - spec.bbox.lo.z());
    view.camera.far = 2.0 * (spec.bbox.hi - spec.bbox.lo).norm();
    view.image = Image(n, n);
    view.image.id = view.id;
    LabelMap mask(n, n);
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        const Ray ray = camera_ray(view.camera, x + 0.5, y + 0.5);
        Eigen::Vector3d color;
        mask(y, x) = static_cast<std::uint8_t>(synthetic_class_at(spec, ray, &color));
        view.image.set_pixel(y, x, color.cwiseMax(0.0).cwiseMin(1.0).cast<float>());
      }
    }
    out.dino.push_back(synthetic_dino(mask, spec.classes(), spec.dino_stride, spec.dino_noise,
                                      stable_hash("dino", spec.seed), view.id));
    view.mask = std::move(mask);
    if (held) out.scene.test_views.push_back(view.id);
    out.scene.views.push_back(std::move(view));
  }
  return out;
}

void write_synthetic_scene(const SyntheticScene& s, const std::filesystem::path& dir) {
  write_llff(s.scene, dir);
  std::filesystem::create_directories(dir / "masks");
  write_masks(s.scene, dir / "masks");
  std::filesystem::create_directories(dir / "dino");
  for (const auto& d : s.dino) write_dino_map(d, dir / "dino" / (d.view_id + ".ovdn"));
  write_text_bank(s.bank, dir / "textbank.ovtb");
  std::ofstream(dir / "synthetic.json") << spec_to_json(s.spec) << "\n";
}

}  // namespace ov3d
