#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ov3d/numerics.hpp"

namespace ov3d {

struct Aabb {
  Eigen::Vector3d lo{-1, -1, -1};
  Eigen::Vector3d hi{1, 1, 1};

  bool contains(const Eigen::Vector3d& p) const {
    return (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all();
  }
  Eigen::Vector3d extent() const { return hi - lo; }
};

/// Trainable parameter groups. Freezing operates on whole groups.
enum class ParamGroup : unsigned {
  Shared = 1u << 0,
  Density = 1u << 1,
  Selection = 1u << 2,
  RgbHead = 1u << 3,
  FeatureHead = 1u << 4,
};

using GroupMask = unsigned;
inline constexpr GroupMask kAllGroups = 0x1f;

constexpr GroupMask operator|(ParamGroup a, ParamGroup b) {
  return static_cast<GroupMask>(a) | static_cast<GroupMask>(b);
}
constexpr GroupMask operator|(GroupMask a, ParamGroup b) { return a | static_cast<GroupMask>(b); }
constexpr bool has_group(GroupMask mask, ParamGroup g) { return (mask & static_cast<GroupMask>(g)) != 0; }

const char* group_name(ParamGroup g);

struct FieldConfig {
  Eigen::Array3i grid{64, 64, 64};
  int appearance_channels = 27;
  int n_scales = 3;
  int feature_dim = 512;
  int hidden_width = 64;
  int hidden_layers = 2;
  int view_frequencies = 4;
  double density_init = 0.0;
  double appearance_init = 0.1;
  Aabb bbox;
};

/// Eight vertices and weights of a trilinear lookup. `vertex` holds cell
/// indices; multiply by the channel count to address a grid tensor.
template <typename Scalar>
struct TrilinearStencil {
  std::array<Index, 8> vertex{};
  std::array<Scalar, 8> weight{};
  bool inside = false;
};

/// Dense multilayer perceptron with ReLU hidden layers and a linear output.
/// Columns of the input matrix are samples.
template <typename Scalar>
class Mlp {
 public:
  struct Cache {
    std::vector<MatrixX<Scalar>> activations;  // input of every layer
  };

  Mlp() = default;
  Mlp(const std::string& name, int in, int hidden, int hidden_layers, int out);

  int in_dim() const { return in_; }
  int out_dim() const { return out_; }
  int layer_count() const { return static_cast<int>(params_.size() / 2); }

  void initialize(std::uint64_t seed);

  MatrixX<Scalar> forward(const MatrixX<Scalar>& input, Cache* cache = nullptr) const;
  /// Accumulates weight gradients (unless `accumulate` is false) and returns
  /// dL/dinput when `need_input_grad` is set, otherwise an empty matrix.
  MatrixX<Scalar> backward(const Cache& cache, const MatrixX<Scalar>& d_out, bool accumulate,
                           bool need_input_grad);

  std::vector<ParamTensor<Scalar>>& params() { return params_; }
  const std::vector<ParamTensor<Scalar>>& params() const { return params_; }

  template <typename Other>
  Mlp<Other> cast() const {
    Mlp<Other> out;
    out.in_ = in_;
    out.out_ = out_;
    for (const auto& p : params_) out.params_.push_back(p.template cast<Other>());
    return out;
  }

  static Mlp from_params(std::vector<ParamTensor<Scalar>> params);

 private:
  template <typename>
  friend class Mlp;

  int in_ = 0;
  int out_ = 0;
  std::vector<ParamTensor<Scalar>> params_;  // weight0, bias0, weight1, bias1, ...
};

/// Sinusoidal encoding [d, sin(2^k d), cos(2^k d)] for k < frequencies.
template <typename Scalar>
VectorX<Scalar> encode_direction(const Eigen::Vector3d& dir, int frequencies);

inline int encoded_direction_dim(int frequencies) { return 3 + 6 * frequencies; }

/// Scene field: shared appearance volume feeding an RGB head (view
/// dependent) and a feature head (view independent), plus independent
/// density and scale-selection volumes. All volumes share one vertex grid
/// spanning `bbox`.
template <typename Scalar>
class FieldModel {
 public:
  FieldModel() = default;
  FieldModel(const FieldConfig& config, std::uint64_t seed);

  const FieldConfig& config() const { return config_; }
  Index cell_count() const { return static_cast<Index>(config_.grid.prod()); }

  TrilinearStencil<Scalar> stencil(const Eigen::Vector3d& position) const;

  /// Trilinear blend of `channels` values per vertex from `grid`.
  void interpolate(const ParamTensor<Scalar>& grid, int channels, const TrilinearStencil<Scalar>& s,
                   Scalar* out) const;
  void scatter_grad(ParamTensor<Scalar>& grid, int channels, const TrilinearStencil<Scalar>& s,
                    const Scalar* d_out) const;

  Scalar query_density(const Eigen::Vector3d& position) const;
  VectorX<Scalar> query_selection_logits(const Eigen::Vector3d& position) const;
  Vector3<Scalar> query_rgb(const Eigen::Vector3d& position, const std::optional<Eigen::Vector3d>& view_dir) const;
  VectorX<Scalar> query_feature(const Eigen::Vector3d& position) const;

  /// Tensors belonging to the groups in `mask`, in a fixed order.
  std::vector<ParamTensor<Scalar>*> parameters(GroupMask mask = kAllGroups);
  std::vector<const ParamTensor<Scalar>*> parameters(GroupMask mask = kAllGroups) const;
  ParamGroup group_of(const ParamTensor<Scalar>& tensor) const;
  void zero_grad();

  /// Replaces the selection volume and feature head for new scale/feature
  /// dimensions (used when a reconstruction checkpoint meets feature files).
  void reset_feature_branch(int n_scales, int feature_dim, std::uint64_t seed);

  template <typename Other>
  FieldModel<Other> cast() const {
    FieldModel<Other> out;
    out.config_ = config_;
    out.shared = shared.template cast<Other>();
    out.density = density.template cast<Other>();
    out.selection = selection.template cast<Other>();
    out.rgb_head = rgb_head.template cast<Other>();
    out.feature_head = feature_head.template cast<Other>();
    return out;
  }

  static FieldModel from_tensors(const FieldConfig& config, ParamTensor<Scalar> shared,
                                 ParamTensor<Scalar> density, ParamTensor<Scalar> selection, Mlp<Scalar> rgb,
                                 Mlp<Scalar> feature);

  ParamTensor<Scalar> shared;
  ParamTensor<Scalar> density;
  ParamTensor<Scalar> selection;
  Mlp<Scalar> rgb_head;
  Mlp<Scalar> feature_head;

 private:
  template <typename>
  friend class FieldModel;

  FieldConfig config_;
};

template <typename Scalar>
inline Scalar softplus(Scalar x) {
  using std::exp;
  using std::log1p;
  return x > Scalar(20) ? x + log1p(exp(-x)) : log1p(exp(x));
}

template <typename Scalar>
inline Scalar sigmoid(Scalar x) {
  using std::exp;
  return Scalar(1) / (Scalar(1) + exp(-x));
}

/// Concatenated values of the tensors in `mask` (f64), and the inverse.
template <typename Scalar>
Eigen::VectorXd pack_values(const FieldModel<Scalar>& model, GroupMask mask = kAllGroups);
template <typename Scalar>
void unpack_values(FieldModel<Scalar>& model, const Eigen::VectorXd& values, GroupMask mask = kAllGroups);
template <typename Scalar>
Eigen::VectorXd pack_grads(const FieldModel<Scalar>& model, GroupMask mask = kAllGroups);

/// Checkpoint: "OV3D", u32 version, then named tensors until end of file,
/// each as (u32 name length, name, u32 rank, u32 extents, f32 payload).
void save_checkpoint(const FieldModel<float>& model, const std::filesystem::path& path);
FieldModel<float> load_checkpoint(const std::filesystem::path& path);

inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace ov3d
