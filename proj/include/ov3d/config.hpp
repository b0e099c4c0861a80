#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include "ov3d/field.hpp"

namespace ov3d {

/// Every knob of reconstruction and segmentation training. Defaults are the
/// desk-scale schedule; full-scale runs only need a config file.
struct TrainConfig {
  // schedule
  int recon_iterations = 1000;
  int phase_a_iterations = 500;
  int phase_b_iterations = 1000;
  // batches
  int ray_batch = 4096;
  int patch_batch = 2;
  int patch_size = 64;
  int ray_downsample = 8;
  int patch_downsample = 5;
  int n_samples = 128;
  // optimizer
  double recon_lr_volume = 0.02;
  double recon_lr_mlp = 1e-3;
  double lr_volume = 0.02;
  double lr_mlp = 1e-4;
  double lr_volume_ft = 5e-3;
  double lr_mlp_ft = 5e-5;
  std::array<double, 2> betas{0.9, 0.99};
  double lr_decay_target = 0.1;
  // losses
  double tau = 0.2;
  double b = 0.7;
  double lambda_pos = 200;
  double lambda_neg = 0.2;
  bool use_rda = true;
  bool use_fda = true;
  bool fda_balanced = true;  // false: plain correlation loss
  int relevancy_refresh = 500;
  // model
  Eigen::Array3i grid{64, 64, 64};
  int appearance_channels = 27;
  int hidden_width = 64;
  int hidden_layers = 2;
  int view_frequencies = 4;
  double density_init = -4.0;
  double appearance_init = 0.1;
  double bbox_margin = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
/// Unknown keys and malformed values are errors naming the line.
TrainConfig parse_config(const std::string& text, TrainConfig base = {});
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {});
std::string format_config(const TrainConfig& config);

FieldConfig field_config(const TrainConfig& config, const Aabb& bbox, int n_scales, int feature_dim);

}  // namespace ov3d
