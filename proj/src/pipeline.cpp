#include "ov3d/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>

#include <json.hpp>

#include "ov3d/error.hpp"

namespace ov3d {

using nlohmann::json;
namespace fs = std::filesystem;

EncoderKind parse_encoder_kind(const std::string& name) {
  if (name == "synthetic") return EncoderKind::Synthetic;
  if (name == "service") return EncoderKind::Service;
  fail(ErrorCode::InvalidArgument, "unknown encoder '" + name + "' (expected synthetic or service)");
}

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SyntheticSpec read_synthetic_spec(const fs::path& scene_dir) {
  const fs::path p = scene_dir / "synthetic.json";
  if (!fs::exists(p)) fail(ErrorCode::Io, "synthetic encoder needs " + p.string());
  return spec_from_json(read_text(p));
}

std::string fmt(double v) {
  if (std::isnan(v)) return "null";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

MultiScaleFeatureMap extract_view_features(const Image& image, const ScaleSpec& scales, PatchEncoder& encoder,
                                           std::uint64_t seed, const ExtractOptions& options) {
  std::mt19937_64 rng(stable_hash("extract:" + image.id, seed));
  return extract_pixel_features(image, scales, encoder, rng, options);
}

void run_extract(const fs::path& scene_dir, const ScaleSpec& scales, const EncoderSetup& setup, const fs::path& out_dir,
                 std::uint64_t seed, bool half_precision) {
  Scene scene = load_llff(scene_dir);
  fs::create_directories(out_dir);
  std::unique_ptr<PatchEncoder> encoder;
  if (setup.kind == EncoderKind::Synthetic) {
    const SyntheticSpec spec = read_synthetic_spec(scene_dir);
    if (scene.labels.empty()) scene.labels = spec.labels();
    load_masks(scene_dir, scene);
    std::map<std::string, LabelMap> masks;
    for (const auto& v : scene.views) {
      if (!v.mask) fail(ErrorCode::Io, "synthetic encoder: no mask for view " + v.id);
      masks.emplace(v.id, *v.mask);
    }
    encoder = std::make_unique<SyntheticClipEncoder>(synthetic_prototypes(spec), std::move(masks), spec.noise_sigma,
                                                     stable_hash("clip", spec.seed));
  } else {
    encoder = std::make_unique<ServiceEncoder>(setup.service);
  }
  for (const auto& v : scene.views) {
    const MultiScaleFeatureMap map = extract_view_features(v.image, scales, *encoder, seed);
    write_feature_map(map, out_dir / (v.id + ".ovsf"), half_precision);
  }
}

void run_textbank(const fs::path& labels_file, const EncoderSetup& setup, const fs::path& out,
                  const fs::path& scene_dir) {
  std::vector<std::string> labels;
  std::istringstream in(read_text(labels_file));
  for (std::string line; std::getline(in, line);) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) labels.push_back(line);
  }
  if (labels.empty()) fail(ErrorCode::InvalidArgument, labels_file.string() + " lists no labels");
  TextFeatureBank bank;
  if (setup.kind == EncoderKind::Synthetic) {
    const SyntheticSpec spec = read_synthetic_spec(scene_dir);
    const auto known = spec.labels();
    const Eigen::MatrixXf protos = synthetic_prototypes(spec);
    bank.labels = labels;
    bank.features.resize(static_cast<Eigen::Index>(labels.size()), protos.cols());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const auto it = std::find(known.begin(), known.end(), labels[i]);
      if (it == known.end()) fail(ErrorCode::InvalidArgument, "synthetic encoder knows no label '" + labels[i] + "'");
      bank.features.row(static_cast<Eigen::Index>(i)) = protos.row(it - known.begin());
    }
  } else {
    ServiceEncoder encoder(setup.service);
    bank = encoder.encode_text(labels);
  }
  bank.validate();
  write_text_bank(bank, out);
}

void run_reconstruct(const fs::path& scene_dir, const TrainConfig& config, const fs::path& out, std::ostream* log) {
  LlffOptions lo;
  lo.bbox_margin = config.bbox_margin;
  const Scene scene = load_llff(scene_dir, lo);
  // The feature branch is sized when segmentation training meets the features.
  FieldModel<float> model(field_config(config, scene.bbox, 1, 1), config.seed);
  TrainState state = make_train_state(std::move(model), config);
  train_reconstruction(state, scene, config, log);
  save_checkpoint(state.model, out);
}

void run_train(const fs::path& scene_dir, const fs::path& features_dir, const fs::path& dino_dir,
               const fs::path& textbank, const TrainConfig& config, const fs::path& ckpt, const fs::path& out,
               std::ostream* log) {
  LlffOptions lo;
  lo.bbox_margin = config.bbox_margin;
  const Scene scene = load_llff(scene_dir, lo);
  const TextFeatureBank bank = read_text_bank(textbank);
  std::vector<MultiScaleFeatureMap> features(scene.views.size());
  std::vector<DinoMap> dino(scene.views.size());
  SegmentationInputs inputs;
  inputs.scene = &scene;
  inputs.bank = &bank;
  for (std::size_t v = 0; v < scene.views.size(); ++v) {
    const auto& id = scene.views[v].id;
    const fs::path fp = features_dir / (id + ".ovsf");
    const fs::path dp = dino_dir / (id + ".ovdn");
    const bool has_f = !scene.is_test(id) && fs::exists(fp);
    const bool has_d = config.use_fda && has_f && !dino_dir.empty() && fs::exists(dp);
    if (has_f) features[v] = read_feature_map(fp);
    if (has_d) dino[v] = read_dino_map(dp);
    inputs.features.push_back(has_f ? &features[v] : nullptr);
    inputs.dino.push_back(has_d ? &dino[v] : nullptr);
  }
  const MultiScaleFeatureMap* first = nullptr;
  for (const auto* f : inputs.features)
    if (f && !first) first = f;
  if (!first) fail(ErrorCode::Io, "no feature files for the training views in " + features_dir.string());
  FieldModel<float> model = load_checkpoint(ckpt);
  model.reset_feature_branch(first->n_scales(), first->dim, config.seed);
  TrainState state = make_train_state(std::move(model), config);
  train_segmentation(state, inputs, config, log);
  save_checkpoint(state.model, out);
}

void run_segment(const fs::path& ckpt, const fs::path& textbank, const fs::path& scene_dir,
                 std::vector<std::string> views, double tau, int n_samples, const fs::path& out) {
  const FieldModel<float> model = load_checkpoint(ckpt);
  const TextFeatureBank bank = read_text_bank(textbank);
  const Scene scene = load_llff(scene_dir);
  if (views.empty()) {
    for (int i : scene.test_indices()) views.push_back(scene.views[static_cast<std::size_t>(i)].id);
    if (views.empty())
      for (const auto& v : scene.views) views.push_back(v.id);
  }
  fs::create_directories(out);
  json index;
  index["labels"] = bank.labels;
  index["views"] = views;
  for (const auto& id : views) {
    const int i = scene.index_of(id);
    if (i < 0) fail(ErrorCode::InvalidArgument, "scene has no view '" + id + "'");
    SegmentationResult r = segment_view(model, scene.views[static_cast<std::size_t>(i)].camera, bank, tau, 1, n_samples);
    r.view_id = id;
    export_maps(r, bank.labels, out);
  }
  std::ofstream(out / "index.json") << index.dump(2) << "\n";
}

std::string EvalReport::to_json() const {
  // Hand-formatted with round-trip precision so equal reports compare equal as text.
  std::ostringstream o;
  auto list = [&](const std::vector<double>& v) {
    o << "[";
    for (std::size_t i = 0; i < v.size(); ++i) o << (i ? ", " : "") << fmt(v[i]);
    o << "]";
  };
  o << "{\n  \"views\": " << json(views).dump() << ",\n  \"labels\": " << json(labels).dump() << ",\n";
  o << "  \"mIoU\": " << fmt(iou.mean) << ",\n  \"mAP\": " << fmt(ap.mean) << ",\n  \"iou\": ";
  list(iou.per_class);
  o << ",\n  \"ap\": ";
  list(ap.per_class);
  o << ",\n  \"ap_skipped_classes\": " << json(skipped_ap).dump() << "\n}\n";
  return o.str();
}

EvalReport run_eval(const fs::path& pred_dir, const fs::path& masks_dir) {
  if (!fs::is_directory(masks_dir)) fail(ErrorCode::Io, "missing " + masks_dir.string());
  std::vector<fs::path> masks;
  for (const auto& e : fs::directory_iterator(masks_dir))
    if (e.is_regular_file() && e.path().extension() == ".png") masks.push_back(e.path());
  std::sort(masks.begin(), masks.end());
  EvalReport report;
  std::vector<LabelMap> pred, gt;
  std::vector<std::vector<Plane>> scores;
  for (const auto& m : masks) {
    const std::string id = m.stem().string();
    if (!fs::exists(pred_dir / (id + "_labels.png"))) continue;
    SegmentationResult r = import_maps(pred_dir, id);
    LabelMap g = read_indexed_png(m);
    if (g.rows() != r.labels.rows() || g.cols() != r.labels.cols()) {
      fail(ErrorCode::ShapeMismatch, "mask of view " + id + " does not match its prediction");
    }
    if (report.labels.empty()) {
      const json meta = json::parse(read_text(pred_dir / (id + ".json")));
      report.labels = meta.at("labels").get<std::vector<std::string>>();
    }
    if (r.classes() != static_cast<int>(report.labels.size())) {
      fail(ErrorCode::ShapeMismatch, "prediction of view " + id + " has a different class count");
    }
    report.views.push_back(id);
    pred.push_back(std::move(r.labels));
    scores.push_back(std::move(r.scores));
    gt.push_back(std::move(g));
  }
  if (report.views.empty()) fail(ErrorCode::Io, "no prediction in " + pred_dir.string() + " matches a mask");
  const int classes = static_cast<int>(report.labels.size());
  report.iou = miou(pred, gt, classes);
  report.ap = map_metric(scores, gt, classes, &report.skipped_ap);
  return report;
}

void run_synth(const fs::path& spec_file, const fs::path& out) {
  const SyntheticSpec spec = spec_file.empty() ? SyntheticSpec::standard() : spec_from_json(read_text(spec_file));
  write_synthetic_scene(make_synthetic_scene(spec), out);
}

// ---------------------------------------------------------------------------

SyntheticInputs prepare_synthetic(const SyntheticSpec& spec, const ScaleSpec& scales, std::uint64_t seed) {
  SyntheticInputs in{make_synthetic_scene(spec), scales, {}};
  SyntheticClipEncoder encoder = in.data.encoder();
  for (const auto& v : in.data.scene.views) in.features.push_back(extract_view_features(v.image, scales, encoder, seed));
  return in;
}

FieldModel<float> reconstruct_synthetic(const SyntheticInputs& inputs, const TrainConfig& config, std::ostream* log) {
  FieldModel<float> model(field_config(config, inputs.data.scene.bbox, 1, 1), config.seed);
  TrainState state = make_train_state(std::move(model), config);
  train_reconstruction(state, inputs.data.scene, config, log);
  return std::move(state.model);
}

EvalReport evaluate_views(const FieldModel<float>& model, const Scene& scene, const std::vector<int>& views,
                          const TextFeatureBank& bank, double tau, int n_samples) {
  EvalReport report;
  report.labels = bank.labels;
  std::vector<LabelMap> pred, gt;
  std::vector<std::vector<Plane>> scores;
  for (int i : views) {
    const View& v = scene.views[static_cast<std::size_t>(i)];
    require(v.mask.has_value(), ErrorCode::InvalidArgument, "evaluate_views: view " + v.id + " has no mask");
    SegmentationResult r = segment_view(model, v.camera, bank, tau, 1, n_samples);
    report.views.push_back(v.id);
    pred.push_back(std::move(r.labels));
    scores.push_back(std::move(r.scores));
    gt.push_back(*v.mask);
  }
  report.iou = miou(pred, gt, bank.classes());
  report.ap = map_metric(scores, gt, bank.classes(), &report.skipped_ap);
  return report;
}

SegmentationRun segment_synthetic(const SyntheticInputs& inputs, const FieldModel<float>& reconstruction,
                                  const TrainConfig& config, std::ostream* log) {
  const Scene& scene = inputs.data.scene;
  FieldModel<float> model = reconstruction;
  const auto& f0 = inputs.features.front();
  model.reset_feature_branch(f0.n_scales(), f0.dim, config.seed);
  SegmentationRun run{make_train_state(std::move(model), config), {}};
  SegmentationInputs si;
  si.scene = &scene;
  si.bank = &inputs.data.bank;
  for (std::size_t v = 0; v < scene.views.size(); ++v) {
    const bool train = !scene.is_test(scene.views[v].id);
    si.features.push_back(train ? &inputs.features[v] : nullptr);
    si.dino.push_back(train ? &inputs.data.dino[v] : nullptr);
  }
  train_segmentation(run.state, si, config, log);
  run.report = evaluate_views(run.state.model, scene, scene.test_indices(), inputs.data.bank, config.tau,
                              config.n_samples);
  return run;
}

}  // namespace ov3d
