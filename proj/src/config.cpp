#include "ov3d/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

#include "ov3d/error.hpp"

namespace ov3d {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

double to_double(const std::string& v) {
  double out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) throw std::invalid_argument("not a number: " + v);
  return out;
}

long long to_int(const std::string& v) {
  long long out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) throw std::invalid_argument("not an integer: " + v);
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("not a boolean: " + v);
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct Key {
  std::string name;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

#define INT_KEY(field)                                                                        \
  Key {                                                                                       \
    #field, [](TrainConfig& c, const std::string& v) { c.field = static_cast<int>(to_int(v)); }, \
        [](const TrainConfig& c) { return std::to_string(c.field); }                          \
  }
#define REAL_KEY(field)                                                             \
  Key {                                                                             \
    #field, [](TrainConfig& c, const std::string& v) { c.field = to_double(v); },   \
        [](const TrainConfig& c) { return fmt(c.field); }                           \
  }
#define BOOL_KEY(field)                                                                 \
  Key {                                                                                 \
    #field, [](TrainConfig& c, const std::string& v) { c.field = to_bool(v); },         \
        [](const TrainConfig& c) { return std::string(c.field ? "true" : "false"); }    \
  }

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      INT_KEY(recon_iterations),
      INT_KEY(phase_a_iterations),
      INT_KEY(phase_b_iterations),
      INT_KEY(ray_batch),
      INT_KEY(patch_batch),
      INT_KEY(patch_size),
      INT_KEY(ray_downsample),
      INT_KEY(patch_downsample),
      INT_KEY(n_samples),
      REAL_KEY(recon_lr_volume),
      REAL_KEY(recon_lr_mlp),
      REAL_KEY(lr_volume),
      REAL_KEY(lr_mlp),
      REAL_KEY(lr_volume_ft),
      REAL_KEY(lr_mlp_ft),
      Key{"betas",
          [](TrainConfig& c, const std::string& v) {
            const auto parts = split_list(v);
            if (parts.size() != 2) throw std::invalid_argument("betas needs two values");
            c.betas = {to_double(parts[0]), to_double(parts[1])};
          },
          [](const TrainConfig& c) { return fmt(c.betas[0]) + "," + fmt(c.betas[1]); }},
      REAL_KEY(lr_decay_target),
      REAL_KEY(tau),
      REAL_KEY(b),
      REAL_KEY(lambda_pos),
      REAL_KEY(lambda_neg),
      BOOL_KEY(use_rda),
      BOOL_KEY(use_fda),
      BOOL_KEY(fda_balanced),
      INT_KEY(relevancy_refresh),
      Key{"grid",
          [](TrainConfig& c, const std::string& v) {
            const auto parts = split_list(v);
            if (parts.size() == 1) {
              c.grid.setConstant(static_cast<int>(to_int(parts[0])));
            } else if (parts.size() == 3) {
              for (int i = 0; i < 3; ++i) c.grid(i) = static_cast<int>(to_int(parts[static_cast<std::size_t>(i)]));
            } else {
              throw std::invalid_argument("grid needs one or three values");
            }
          },
          [](const TrainConfig& c) {
            return std::to_string(c.grid(0)) + "," + std::to_string(c.grid(1)) + "," + std::to_string(c.grid(2));
          }},
      INT_KEY(appearance_channels),
      INT_KEY(hidden_width),
      INT_KEY(hidden_layers),
      INT_KEY(view_frequencies),
      REAL_KEY(density_init),
      REAL_KEY(appearance_init),
      REAL_KEY(bbox_margin),
      Key{"seed", [](TrainConfig& c, const std::string& v) { c.seed = static_cast<std::uint64_t>(to_int(v)); },
          [](const TrainConfig& c) { return std::to_string(c.seed); }},
  };
  return table;
}

#undef INT_KEY
#undef REAL_KEY
#undef BOOL_KEY

}  // namespace

void TrainConfig::validate() const {
  auto check = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorCode::InvalidArgument, "config: " + what);
  };
  check(recon_iterations >= 0 && phase_a_iterations >= 0 && phase_b_iterations >= 0, "iteration counts must be >= 0");
  check(ray_batch > 0 && patch_batch >= 0 && patch_size > 0, "batch sizes must be positive");
  check(ray_downsample >= 1 && patch_downsample >= 1, "downsample factors must be >= 1");
  check(n_samples >= 1, "n_samples must be >= 1");
  for (double lr : {recon_lr_volume, recon_lr_mlp, lr_volume, lr_mlp, lr_volume_ft, lr_mlp_ft})
    check(lr > 0, "learning rates must be > 0");
  check(betas[0] >= 0 && betas[0] < 1 && betas[1] >= 0 && betas[1] < 1, "betas must lie in [0, 1)");
  check(lr_decay_target > 0 && lr_decay_target <= 1, "lr_decay_target must lie in (0, 1]");
  check(tau > 0, "tau must be > 0");
  check(lambda_pos >= 0 && lambda_neg >= 0, "loss weights must be >= 0");
  check(relevancy_refresh >= 1, "relevancy_refresh must be >= 1");
  check((grid >= 2).all(), "grid extents must be >= 2");
  check(appearance_channels > 0 && hidden_width > 0 && hidden_layers >= 0 && view_frequencies >= 0,
        "model sizes must be positive");
  check(bbox_margin >= 0, "bbox_margin must be >= 0");
}

TrainConfig parse_config(const std::string& text, TrainConfig base) {
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorCode::Format, "config line " + std::to_string(number) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    bool found = false;
    for (const auto& k : keys()) {
      if (k.name != key) continue;
      found = true;
      try {
        k.set(base, value);
      } catch (const std::invalid_argument& e) {
        fail(ErrorCode::Format, "config line " + std::to_string(number) + " (" + key + "): " + e.what());
      }
    }
    if (!found) fail(ErrorCode::Format, "config line " + std::to_string(number) + ": unknown key '" + key + "'");
  }
  base.validate();
  return base;
}

TrainConfig load_config(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), base);
}

std::string format_config(const TrainConfig& config) {
  std::string out;
  for (const auto& k : keys()) out += k.name + " = " + k.get(config) + "\n";
  return out;
}

FieldConfig field_config(const TrainConfig& config, const Aabb& bbox, int n_scales, int feature_dim) {
  FieldConfig f;
  f.grid = config.grid;
  f.appearance_channels = config.appearance_channels;
  f.n_scales = n_scales;
  f.feature_dim = feature_dim;
  f.hidden_width = config.hidden_width;
  f.hidden_layers = config.hidden_layers;
  f.view_frequencies = config.view_frequencies;
  f.density_init = config.density_init;
  f.appearance_init = config.appearance_init;
  f.bbox = bbox;
  return f;
}

}  // namespace ov3d
