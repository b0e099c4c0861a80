#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "ov3d/error.hpp"
#include "ov3d/pipeline.hpp"

namespace {

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      ov3d::fail(ov3d::ErrorCode::InvalidArgument, "not an integer list: '" + text + "'");
    }
  }
  return out;
}

std::vector<std::string> parse_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

ov3d::TrainConfig config_from(const std::string& path) {
  return path.empty() ? ov3d::TrainConfig{} : ov3d::load_config(path);
}

// Training logs go to a file when --log is given, else to stdout.
struct LogSink {
  std::ofstream file;
  std::ostream* stream = &std::cout;
  explicit LogSink(const std::string& path) {
    if (path.empty()) return;
    file.open(path);
    if (!file) ov3d::fail(ov3d::ErrorCode::Io, "cannot write " + path);
    stream = &file;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-vocabulary 3D segmentation on radiance fields"};
  app.require_subcommand(1);

  std::string scene, out, encoder = "synthetic", scales = "5,7,10", service_dir;
  std::uint64_t seed = 0;
  int feature_dim = 512;
  bool half = false;
  auto* extract = app.add_subcommand("extract", "multi-scale pixel features for every view");
  extract->add_option("--scene", scene, "LLFF scene directory")->required();
  extract->add_option("--scales", scales, "patch-size divisors, comma separated");
  extract->add_option("--encoder", encoder, "synthetic or service");
  extract->add_option("--out", out, "output directory")->required();
  extract->add_option("--seed", seed, "window jitter seed");
  extract->add_option("--service-dir", service_dir, "request directory of the encoder service");
  extract->add_option("--feature-dim", feature_dim, "embedding width reported by the service");
  extract->add_flag("--half", half, "store features as f16");

  std::string labels;
  auto* textbank = app.add_subcommand("textbank", "encode class labels");
  textbank->add_option("--labels", labels, "one label per line")->required();
  textbank->add_option("--encoder", encoder, "synthetic or service");
  textbank->add_option("--out", out, "output .ovtb")->required();
  textbank->add_option("--scene", scene, "scene directory (synthetic encoder)");
  textbank->add_option("--service-dir", service_dir, "request directory of the encoder service");

  std::string config, log, ckpt, features, dino, bank;
  auto* reconstruct = app.add_subcommand("reconstruct", "photometric reconstruction");
  reconstruct->add_option("--scene", scene)->required();
  reconstruct->add_option("--config", config);
  reconstruct->add_option("--out", out, "checkpoint")->required();
  reconstruct->add_option("--log", log, "JSON-lines training log");

  auto* train = app.add_subcommand("train", "segmentation training from a reconstruction");
  train->add_option("--scene", scene)->required();
  train->add_option("--features", features, "directory of .ovsf files")->required();
  train->add_option("--dino", dino, "directory of .ovdn files");
  train->add_option("--textbank", bank)->required();
  train->add_option("--config", config);
  train->add_option("--ckpt", ckpt, "reconstruction checkpoint")->required();
  train->add_option("--out", out, "checkpoint")->required();
  train->add_option("--log", log, "JSON-lines training log");

  std::string views;
  double tau = -1;
  int n_samples = -1;
  auto* segment = app.add_subcommand("segment", "render label and score maps");
  segment->add_option("--ckpt", ckpt)->required();
  segment->add_option("--textbank", bank)->required();
  segment->add_option("--scene", scene, "scene directory for the cameras")->required();
  segment->add_option("--views", views, "comma-separated view ids (default: held-out views)");
  segment->add_option("--config", config, "tau and n_samples are taken from it");
  segment->add_option("--tau", tau);
  segment->add_option("--samples", n_samples);
  segment->add_option("--out", out)->required();

  std::string pred, masks, report;
  auto* eval = app.add_subcommand("eval", "mIoU and mAP against ground-truth masks");
  eval->add_option("--pred", pred)->required();
  eval->add_option("--masks", masks)->required();
  eval->add_option("--report", report, "JSON report (stdout when absent)");

  std::string spec;
  auto* synth = app.add_subcommand("synth", "generate a synthetic scene with fixtures");
  synth->add_option("--spec", spec, "JSON spec (standard layout when absent)");
  synth->add_option("--out", out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    ov3d::EncoderSetup setup;
    setup.kind = ov3d::parse_encoder_kind(encoder);
    setup.service.directory = service_dir;
    setup.service.feature_dim = feature_dim;
    if (setup.kind == ov3d::EncoderKind::Service && service_dir.empty()) {
      ov3d::fail(ov3d::ErrorCode::InvalidArgument, "--encoder service needs --service-dir");
    }

    if (*extract) {
      ov3d::ScaleSpec s;
      s.divisors = parse_int_list(scales);
      ov3d::run_extract(scene, s, setup, out, seed, half);
    } else if (*textbank) {
      ov3d::run_textbank(labels, setup, out, scene);
    } else if (*reconstruct) {
      LogSink sink(log);
      ov3d::run_reconstruct(scene, config_from(config), out, sink.stream);
    } else if (*train) {
      LogSink sink(log);
      ov3d::run_train(scene, features, dino, bank, config_from(config), ckpt, out, sink.stream);
    } else if (*segment) {
      const ov3d::TrainConfig cfg = config_from(config);
      ov3d::run_segment(ckpt, bank, scene, parse_list(views), tau > 0 ? tau : cfg.tau,
                        n_samples > 0 ? n_samples : cfg.n_samples, out);
    } else if (*eval) {
      const ov3d::EvalReport r = ov3d::run_eval(pred, masks);
      if (report.empty()) {
        std::cout << r.to_json();
      } else {
        std::ofstream(report) << r.to_json();
        std::printf("mIoU %.4f  mAP %.4f  (%zu views)\n", r.iou.mean, r.ap.mean, r.views.size());
      }
      for (int c : r.skipped_ap) std::fprintf(stderr, "note: class %d absent from gt, skipped in mAP\n", c);
    } else if (*synth) {
      ov3d::run_synth(spec, out);
    }
  } catch (const ov3d::Error& e) {
    std::fprintf(stderr, "error (%s): %s\n", ov3d::to_string(e.code()), e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
