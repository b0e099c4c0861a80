#include "ov3d/dataset.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "ov3d/error.hpp"
#include "ov3d/npy.hpp"

namespace ov3d {

using nlohmann::json;

int Scene::index_of(const std::string& view_id) const {
  for (std::size_t i = 0; i < views.size(); ++i)
    if (views[i].id == view_id) return static_cast<int>(i);
  return -1;
}

bool Scene::is_test(const std::string& view_id) const {
  return std::find(test_views.begin(), test_views.end(), view_id) != test_views.end();
}

std::vector<int> Scene::train_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < views.size(); ++i)
    if (!is_test(views[i].id)) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> Scene::test_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < views.size(); ++i)
    if (is_test(views[i].id)) out.push_back(static_cast<int>(i));
  return out;
}

Camera camera_from_llff(const double* row) {
  Eigen::Matrix<double, 3, 5> m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 5; ++c) m(r, c) = row[r * 5 + c];
  Camera cam;
  // LLFF columns are (down, right, back); ours are (right, up, back).
  cam.c2w.col(0) = m.col(1);
  cam.c2w.col(1) = -m.col(0);
  cam.c2w.col(2) = m.col(2);
  cam.c2w.col(3) = m.col(3);
  cam.height = static_cast<int>(std::lround(m(0, 4)));
  cam.width = static_cast<int>(std::lround(m(1, 4)));
  cam.focal = m(2, 4);
  cam.near = row[15];
  cam.far = row[16];
  require(cam.height > 0 && cam.width > 0 && cam.focal > 0, ErrorCode::Format, "poses_bounds: bad intrinsics");
  require(cam.near < cam.far, ErrorCode::Format, "poses_bounds: near must be < far");
  return cam;
}

std::array<double, 17> llff_from_camera(const Camera& camera) {
  Eigen::Matrix<double, 3, 5> m;
  m.col(0) = -camera.c2w.col(1);
  m.col(1) = camera.c2w.col(0);
  m.col(2) = camera.c2w.col(2);
  m.col(3) = camera.c2w.col(3);
  m.col(4) << camera.height, camera.width, camera.focal;
  std::array<double, 17> row{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 5; ++c) row[static_cast<std::size_t>(r * 5 + c)] = m(r, c);
  row[15] = camera.near;
  row[16] = camera.far;
  return row;
}

Aabb bbox_from_cameras(const std::vector<View>& views, double margin) {
  require(!views.empty(), ErrorCode::InvalidArgument, "bbox_from_cameras: no views");
  Eigen::Vector3d lo = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());
  Eigen::Vector3d hi = -lo;
  auto add = [&](const Eigen::Vector3d& p) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  };
  for (const auto& v : views) {
    const Camera& c = v.camera;
    add(c.center());
    for (double px : {0.0, static_cast<double>(c.width)}) {
      for (double py : {0.0, static_cast<double>(c.height)}) {
        const Ray r = camera_ray(c, px, py);
        add(r.origin + r.near * r.direction);
        add(r.origin + r.far * r.direction);
      }
    }
  }
  const Eigen::Vector3d grow = margin * (hi - lo).cwiseMax(1e-6);
  return {lo - grow, hi + grow};
}

namespace {

std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

Eigen::Vector3d vec3(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

}  // namespace

Scene load_llff(const std::filesystem::path& dir, const LlffOptions& options) {
  require(options.downsample >= 1, ErrorCode::InvalidArgument, "load_llff: downsample must be >= 1");
  const auto poses_path = dir / "poses_bounds.npy";
  const auto images_dir = dir / "images";
  if (!std::filesystem::exists(poses_path)) fail(ErrorCode::Io, "missing " + poses_path.string());
  if (!std::filesystem::is_directory(images_dir)) fail(ErrorCode::Io, "missing " + images_dir.string());
  const NpyArray poses = read_npy(poses_path);
  if (poses.shape.size() != 2 || poses.shape[1] != 17) {
    fail(ErrorCode::Format, "poses_bounds.npy must have shape (N, 17)");
  }
  const auto images = list_images(images_dir);
  if (images.size() != poses.shape[0]) {
    fail(ErrorCode::ShapeMismatch, "poses_bounds.npy has " + std::to_string(poses.shape[0]) + " rows but images/ has " +
                                       std::to_string(images.size()) + " images");
  }
  Scene scene;
  for (std::size_t i = 0; i < images.size(); ++i) {
    View v;
    v.camera = camera_from_llff(poses.data.data() + i * 17);
    v.image = read_image(images[i]);
    v.id = v.image.id;
    // Images may be stored at a lower resolution than the pose intrinsics.
    if (v.image.width() != v.camera.width || v.image.height() != v.camera.height) {
      const double s = static_cast<double>(v.image.width()) / v.camera.width;
      v.camera.focal *= s;
      v.camera.width = v.image.width();
      v.camera.height = v.image.height();
    }
    if (options.downsample > 1) {
      v.image = downsample_image(v.image, options.downsample);
      v.camera.focal /= options.downsample;
      v.camera.width = v.image.width();
      v.camera.height = v.image.height();
    }
    if (!scene.views.empty()) {
      const Camera& c0 = scene.views.front().camera;
      require(c0.width == v.camera.width && c0.height == v.camera.height && c0.focal == v.camera.focal,
              ErrorCode::Format, "load_llff: views must share intrinsics (" + v.id + ")");
    }
    scene.views.push_back(std::move(v));
  }

  bool have_bbox = false;
  const auto meta_path = dir / "scene.json";
  if (std::filesystem::exists(meta_path)) {
    std::ifstream in(meta_path);
    json meta;
    try {
      in >> meta;
      if (meta.contains("labels")) scene.labels = meta.at("labels").get<std::vector<std::string>>();
      if (meta.contains("test_views")) scene.test_views = meta.at("test_views").get<std::vector<std::string>>();
      if (meta.contains("bbox")) {
        scene.bbox.lo = vec3(meta.at("bbox").at("lo"));
        scene.bbox.hi = vec3(meta.at("bbox").at("hi"));
        have_bbox = true;
      }
    } catch (const json::exception& e) {
      fail(ErrorCode::Format, "scene.json: " + std::string(e.what()));
    }
  }
  if (!have_bbox) scene.bbox = bbox_from_cameras(scene.views, options.bbox_margin);
  return scene;
}

void write_llff(const Scene& scene, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  NpyArray poses;
  poses.shape = {scene.views.size(), 17};
  for (const auto& v : scene.views) {
    const auto row = llff_from_camera(v.camera);
    poses.data.insert(poses.data.end(), row.begin(), row.end());
    write_png(v.image, dir / "images" / (v.id + ".png"));
  }
  write_npy(poses, dir / "poses_bounds.npy");
  json meta;
  meta["labels"] = scene.labels;
  meta["test_views"] = scene.test_views;
  meta["bbox"] = {{"lo", {scene.bbox.lo.x(), scene.bbox.lo.y(), scene.bbox.lo.z()}},
                  {"hi", {scene.bbox.hi.x(), scene.bbox.hi.y(), scene.bbox.hi.z()}}};
  std::ofstream(dir / "scene.json") << meta.dump(2) << "\n";
}

void load_masks(const std::filesystem::path& dir, Scene& scene) {
  const auto mask_dir = std::filesystem::is_directory(dir / "masks") ? dir / "masks" : dir;
  const int classes = static_cast<int>(scene.labels.size());
  for (auto& v : scene.views) {
    const auto path = mask_dir / (v.id + ".png");
    if (!std::filesystem::exists(path)) continue;
    LabelMap mask = read_indexed_png(path);
    if (mask.rows() != v.image.height() || mask.cols() != v.image.width()) {
      fail(ErrorCode::ShapeMismatch, "mask of view " + v.id + " does not match the image size");
    }
    for (Eigen::Index i = 0; i < mask.size(); ++i) {
      const int c = mask.data()[i];
      if (c != kUnlabeled && (classes == 0 || c >= classes)) {
        fail(ErrorCode::OutOfRange, "mask of view " + v.id + " has class index " + std::to_string(c) + " but only " +
                                        std::to_string(classes) + " labels");
      }
    }
    v.mask = std::move(mask);
  }
}

void write_masks(const Scene& scene, const std::filesystem::path& dir) {
  for (const auto& v : scene.views)
    if (v.mask) write_indexed_png(*v.mask, dir / (v.id + ".png"));
}

}  // namespace ov3d
