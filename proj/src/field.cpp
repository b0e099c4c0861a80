#include "ov3d/field.hpp"

#include <cmath>
#include <random>

#include "ov3d/binary_io.hpp"

namespace ov3d {

const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::Shared: return "shared";
    case ParamGroup::Density: return "density";
    case ParamGroup::Selection: return "selection";
    case ParamGroup::RgbHead: return "rgb_head";
    case ParamGroup::FeatureHead: return "feature_head";
  }
  return "?";
}

namespace {

// MLP forward runs on fixed-width column blocks so a sample's output does not
// depend on how many other samples share the call.
constexpr Index kMlpBlock = 256;

}  // namespace

// ---------------------------------------------------------------------------
// Mlp

template <typename Scalar>
Mlp<Scalar>::Mlp(const std::string& name, int in, int hidden, int hidden_layers, int out) : in_(in), out_(out) {
  require(in > 0 && out > 0 && hidden > 0 && hidden_layers >= 0, ErrorCode::InvalidArgument,
          "Mlp: dimensions must be positive");
  int prev = in;
  for (int l = 0; l <= hidden_layers; ++l) {
    const int next = l == hidden_layers ? out : hidden;
    const std::string prefix = name + "." + std::to_string(l);
    params_.emplace_back(prefix + ".weight", std::vector<Index>{next, prev});
    params_.emplace_back(prefix + ".bias", std::vector<Index>{next});
    prev = next;
  }
}

template <typename Scalar>
Mlp<Scalar> Mlp<Scalar>::from_params(std::vector<ParamTensor<Scalar>> params) {
  require(!params.empty() && params.size() % 2 == 0, ErrorCode::Format, "Mlp: expected weight/bias pairs");
  Mlp out;
  for (std::size_t i = 0; i < params.size(); i += 2) {
    const auto& w = params[i];
    const auto& b = params[i + 1];
    require(w.shape.size() == 2 && b.shape.size() == 1 && b.shape[0] == w.shape[0], ErrorCode::Format,
            "Mlp: malformed layer " + w.name);
    if (i > 0) require(w.shape[1] == params[i - 2].shape[0], ErrorCode::Format, "Mlp: layer width mismatch");
  }
  out.in_ = static_cast<int>(params.front().shape[1]);
  out.out_ = static_cast<int>(params[params.size() - 2].shape[0]);
  out.params_ = std::move(params);
  return out;
}

template <typename Scalar>
void Mlp<Scalar>::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < params_.size(); i += 2) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(params_[i].shape[1]));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto* p : {&params_[i], &params_[i + 1]}) {
      for (Index k = 0; k < p->size(); ++k) p->value(k) = static_cast<Scalar>(dist(rng));
      p->zero_grad();
    }
  }
}

template <typename Scalar>
MatrixX<Scalar> Mlp<Scalar>::forward(const MatrixX<Scalar>& input, Cache* cache) const {
  using RowMap = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  require(input.rows() == in_, ErrorCode::ShapeMismatch, "Mlp::forward: input width mismatch");
  const Index n = input.cols();
  const int layers = layer_count();
  if (cache) {
    cache->activations.assign(static_cast<std::size_t>(layers), MatrixX<Scalar>());
    cache->activations[0] = input;
  }
  MatrixX<Scalar> output(out_, n);
  MatrixX<Scalar> block_in(in_, kMlpBlock);
  for (Index start = 0; start < n; start += kMlpBlock) {
    const Index cols = std::min(kMlpBlock, n - start);
    block_in.setZero();
    block_in.leftCols(cols) = input.middleCols(start, cols);
    MatrixX<Scalar> act = block_in;
    for (int l = 0; l < layers; ++l) {
      const auto& w = params_[2 * static_cast<std::size_t>(l)];
      const auto& b = params_[2 * static_cast<std::size_t>(l) + 1];
      RowMap wm(w.value.data(), w.shape[0], w.shape[1]);
      MatrixX<Scalar> next = wm * act;
      next.colwise() += b.value;
      if (l + 1 < layers) {
        next = next.cwiseMax(Scalar(0));
        if (cache) {
          auto& slot = cache->activations[static_cast<std::size_t>(l) + 1];
          if (slot.size() == 0) slot.resize(next.rows(), n);
          slot.middleCols(start, cols) = next.leftCols(cols);
        }
      }
      act = std::move(next);
    }
    output.middleCols(start, cols) = act.leftCols(cols);
  }
  return output;
}

template <typename Scalar>
MatrixX<Scalar> Mlp<Scalar>::backward(const Cache& cache, const MatrixX<Scalar>& d_out, bool accumulate,
                                      bool need_input_grad) {
  using RowMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  const int layers = layer_count();
  MatrixX<Scalar> delta = d_out;
  for (int l = layers - 1; l >= 0; --l) {
    auto& w = params_[2 * static_cast<std::size_t>(l)];
    auto& b = params_[2 * static_cast<std::size_t>(l) + 1];
    const MatrixX<Scalar>& act = cache.activations[static_cast<std::size_t>(l)];
    if (accumulate) {
      RowMap gw(w.grad.data(), w.shape[0], w.shape[1]);
      gw.noalias() += delta * act.transpose();
      b.grad += delta.rowwise().sum();
    }
    if (l == 0 && !need_input_grad) return {};
    RowMap wm(w.value.data(), w.shape[0], w.shape[1]);
    MatrixX<Scalar> prev = wm.transpose() * delta;
    if (l > 0) prev = prev.cwiseProduct((act.array() > Scalar(0)).template cast<Scalar>().matrix());
    delta = std::move(prev);
  }
  return delta;
}

// ---------------------------------------------------------------------------
// direction encoding

template <typename Scalar>
VectorX<Scalar> encode_direction(const Eigen::Vector3d& dir, int frequencies) {
  VectorX<Scalar> out(encoded_direction_dim(frequencies));
  out.template head<3>() = dir.cast<Scalar>();
  for (int k = 0; k < frequencies; ++k) {
    const double scale = std::ldexp(1.0, k);
    for (int a = 0; a < 3; ++a) {
      out(3 + 6 * k + a) = static_cast<Scalar>(std::sin(scale * dir(a)));
      out(3 + 6 * k + 3 + a) = static_cast<Scalar>(std::cos(scale * dir(a)));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// FieldModel

template <typename Scalar>
FieldModel<Scalar>::FieldModel(const FieldConfig& config, std::uint64_t seed) : config_(config) {
  require((config.grid >= 2).all(), ErrorCode::InvalidArgument, "FieldModel: grid extents must be >= 2");
  require(config.appearance_channels > 0 && config.n_scales > 0 && config.feature_dim > 0, ErrorCode::InvalidArgument,
          "FieldModel: channel counts must be positive");
  require((config.bbox.hi.array() > config.bbox.lo.array()).all(), ErrorCode::InvalidArgument,
          "FieldModel: empty bounding box");
  const std::vector<Index> g{config.grid.x(), config.grid.y(), config.grid.z()};
  auto grid_shape = [&](int c) { return std::vector<Index>{g[0], g[1], g[2], c}; };
  shared = ParamTensor<Scalar>("shared", grid_shape(config.appearance_channels));
  density = ParamTensor<Scalar>("density", grid_shape(1));
  selection = ParamTensor<Scalar>("selection", grid_shape(config.n_scales));

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> app(-config.appearance_init, config.appearance_init);
  for (Index i = 0; i < shared.size(); ++i) shared.value(i) = static_cast<Scalar>(app(rng));
  density.value.setConstant(static_cast<Scalar>(config.density_init));

  rgb_head = Mlp<Scalar>("rgb_head", config.appearance_channels + encoded_direction_dim(config.view_frequencies),
                         config.hidden_width, config.hidden_layers, 3);
  rgb_head.initialize(rng());
  feature_head = Mlp<Scalar>("feature_head", config.appearance_channels, config.hidden_width, config.hidden_layers,
                             config.feature_dim);
  feature_head.initialize(rng());
}

template <typename Scalar>
FieldModel<Scalar> FieldModel<Scalar>::from_tensors(const FieldConfig& config, ParamTensor<Scalar> shared_t,
                                                    ParamTensor<Scalar> density_t, ParamTensor<Scalar> selection_t,
                                                    Mlp<Scalar> rgb, Mlp<Scalar> feature) {
  FieldModel out;
  out.config_ = config;
  out.shared = std::move(shared_t);
  out.density = std::move(density_t);
  out.selection = std::move(selection_t);
  out.rgb_head = std::move(rgb);
  out.feature_head = std::move(feature);
  return out;
}

template <typename Scalar>
void FieldModel<Scalar>::reset_feature_branch(int n_scales, int feature_dim, std::uint64_t seed) {
  config_.n_scales = n_scales;
  config_.feature_dim = feature_dim;
  selection = ParamTensor<Scalar>("selection", {config_.grid.x(), config_.grid.y(), config_.grid.z(), n_scales});
  feature_head = Mlp<Scalar>("feature_head", config_.appearance_channels, config_.hidden_width,
                             config_.hidden_layers, feature_dim);
  feature_head.initialize(seed);
}

template <typename Scalar>
TrilinearStencil<Scalar> FieldModel<Scalar>::stencil(const Eigen::Vector3d& position) const {
  TrilinearStencil<Scalar> s;
  if (!position.allFinite() || !config_.bbox.contains(position)) return s;
  s.inside = true;
  const Eigen::Array3d rel = (position - config_.bbox.lo).array() / config_.bbox.extent().array();
  const Eigen::Array3d g = rel * (config_.grid.cast<double>() - 1.0);
  Eigen::Array3i i0;
  Eigen::Array3d f;
  for (int a = 0; a < 3; ++a) {
    int i = static_cast<int>(std::floor(g(a)));
    i = std::clamp(i, 0, config_.grid(a) - 2);
    i0(a) = i;
    f(a) = std::clamp(g(a) - i, 0.0, 1.0);
  }
  const Index gy = config_.grid.y();
  const Index gz = config_.grid.z();
  for (int k = 0; k < 8; ++k) {
    const int dx = k & 1, dy = (k >> 1) & 1, dz = (k >> 2) & 1;
    const Index x = i0.x() + dx, y = i0.y() + dy, z = i0.z() + dz;
    s.vertex[static_cast<std::size_t>(k)] = (x * gy + y) * gz + z;
    const double w = (dx ? f.x() : 1.0 - f.x()) * (dy ? f.y() : 1.0 - f.y()) * (dz ? f.z() : 1.0 - f.z());
    s.weight[static_cast<std::size_t>(k)] = static_cast<Scalar>(w);
  }
  return s;
}

template <typename Scalar>
void FieldModel<Scalar>::interpolate(const ParamTensor<Scalar>& grid, int channels, const TrilinearStencil<Scalar>& s,
                                     Scalar* out) const {
  for (int c = 0; c < channels; ++c) out[c] = Scalar(0);
  if (!s.inside) return;
  for (std::size_t k = 0; k < 8; ++k) {
    const Scalar w = s.weight[k];
    if (w == Scalar(0)) continue;
    const Scalar* v = grid.value.data() + s.vertex[k] * channels;
    for (int c = 0; c < channels; ++c) out[c] += w * v[c];
  }
}

template <typename Scalar>
void FieldModel<Scalar>::scatter_grad(ParamTensor<Scalar>& grid, int channels, const TrilinearStencil<Scalar>& s,
                                      const Scalar* d_out) const {
  if (!s.inside) return;
  for (std::size_t k = 0; k < 8; ++k) {
    const Scalar w = s.weight[k];
    if (w == Scalar(0)) continue;
    Scalar* g = grid.grad.data() + s.vertex[k] * channels;
    for (int c = 0; c < channels; ++c) g[c] += w * d_out[c];
  }
}

template <typename Scalar>
Scalar FieldModel<Scalar>::query_density(const Eigen::Vector3d& position) const {
  const auto s = stencil(position);
  if (!s.inside) return Scalar(0);
  Scalar raw;
  interpolate(density, 1, s, &raw);
  return softplus(raw);
}

template <typename Scalar>
VectorX<Scalar> FieldModel<Scalar>::query_selection_logits(const Eigen::Vector3d& position) const {
  VectorX<Scalar> out(config_.n_scales);
  interpolate(selection, config_.n_scales, stencil(position), out.data());
  return out;
}

template <typename Scalar>
Vector3<Scalar> FieldModel<Scalar>::query_rgb(const Eigen::Vector3d& position,
                                              const std::optional<Eigen::Vector3d>& view_dir) const {
  if (!view_dir) fail(ErrorCode::InvalidArgument, "query_rgb: view direction required");
  if (std::abs(view_dir->norm() - 1.0) > 1e-5) fail(ErrorCode::InvalidArgument, "query_rgb: view direction not unit");
  const auto s = stencil(position);
  if (!s.inside) return Vector3<Scalar>::Zero();
  const int k = config_.appearance_channels;
  MatrixX<Scalar> in(rgb_head.in_dim(), 1);
  interpolate(shared, k, s, in.data());
  in.col(0).tail(in.rows() - k) = encode_direction<Scalar>(*view_dir, config_.view_frequencies);
  const MatrixX<Scalar> out = rgb_head.forward(in);
  Vector3<Scalar> rgb;
  for (int c = 0; c < 3; ++c) rgb(c) = sigmoid(out(c, 0));
  return rgb;
}

template <typename Scalar>
VectorX<Scalar> FieldModel<Scalar>::query_feature(const Eigen::Vector3d& position) const {
  const auto s = stencil(position);
  if (!s.inside) return VectorX<Scalar>::Zero(config_.feature_dim);
  MatrixX<Scalar> in(config_.appearance_channels, 1);
  interpolate(shared, config_.appearance_channels, s, in.data());
  return feature_head.forward(in).col(0);
}

template <typename Scalar>
std::vector<ParamTensor<Scalar>*> FieldModel<Scalar>::parameters(GroupMask mask) {
  std::vector<ParamTensor<Scalar>*> out;
  if (has_group(mask, ParamGroup::Shared)) out.push_back(&shared);
  if (has_group(mask, ParamGroup::Density)) out.push_back(&density);
  if (has_group(mask, ParamGroup::Selection)) out.push_back(&selection);
  if (has_group(mask, ParamGroup::RgbHead))
    for (auto& p : rgb_head.params()) out.push_back(&p);
  if (has_group(mask, ParamGroup::FeatureHead))
    for (auto& p : feature_head.params()) out.push_back(&p);
  return out;
}

template <typename Scalar>
std::vector<const ParamTensor<Scalar>*> FieldModel<Scalar>::parameters(GroupMask mask) const {
  auto mutable_list = const_cast<FieldModel*>(this)->parameters(mask);
  return {mutable_list.begin(), mutable_list.end()};
}

template <typename Scalar>
ParamGroup FieldModel<Scalar>::group_of(const ParamTensor<Scalar>& tensor) const {
  if (&tensor == &shared) return ParamGroup::Shared;
  if (&tensor == &density) return ParamGroup::Density;
  if (&tensor == &selection) return ParamGroup::Selection;
  for (const auto& p : rgb_head.params())
    if (&p == &tensor) return ParamGroup::RgbHead;
  return ParamGroup::FeatureHead;
}

template <typename Scalar>
void FieldModel<Scalar>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <typename Scalar>
Eigen::VectorXd pack_values(const FieldModel<Scalar>& model, GroupMask mask) {
  Index n = 0;
  for (const auto* p : model.parameters(mask)) n += p->size();
  Eigen::VectorXd out(n);
  Index at = 0;
  for (const auto* p : model.parameters(mask)) {
    out.segment(at, p->size()) = p->value.template cast<double>();
    at += p->size();
  }
  return out;
}

template <typename Scalar>
void unpack_values(FieldModel<Scalar>& model, const Eigen::VectorXd& values, GroupMask mask) {
  Index at = 0;
  for (auto* p : model.parameters(mask)) {
    require(at + p->size() <= values.size(), ErrorCode::ShapeMismatch, "unpack_values: vector too short");
    p->value = values.segment(at, p->size()).template cast<Scalar>();
    at += p->size();
  }
  require(at == values.size(), ErrorCode::ShapeMismatch, "unpack_values: vector too long");
}

template <typename Scalar>
Eigen::VectorXd pack_grads(const FieldModel<Scalar>& model, GroupMask mask) {
  Index n = 0;
  for (const auto* p : model.parameters(mask)) n += p->size();
  Eigen::VectorXd out(n);
  Index at = 0;
  for (const auto* p : model.parameters(mask)) {
    out.segment(at, p->size()) = p->grad.template cast<double>();
    at += p->size();
  }
  return out;
}

// ---------------------------------------------------------------------------
// checkpoint

namespace {

void write_tensor(BinaryWriter& w, const ParamTensor<float>& t) {
  w.string(t.name);
  w.u32(static_cast<std::uint32_t>(t.shape.size()));
  for (Index e : t.shape) w.u32(static_cast<std::uint32_t>(e));
  for (Index i = 0; i < t.size(); ++i) w.f32(t.value(i));
}

}  // namespace

void save_checkpoint(const FieldModel<float>& model, const std::filesystem::path& path) {
  BinaryWriter w;
  w.magic("OV3D");
  w.u32(kCheckpointVersion);
  for (const auto* p : model.parameters()) write_tensor(w, *p);
  ParamTensor<float> bbox("bbox", {2, 3});
  const auto& box = model.config().bbox;
  for (int a = 0; a < 3; ++a) {
    bbox.value(a) = static_cast<float>(box.lo(a));
    bbox.value(3 + a) = static_cast<float>(box.hi(a));
  }
  write_tensor(w, bbox);
  w.save(path);
}

FieldModel<float> load_checkpoint(const std::filesystem::path& path) {
  auto r = BinaryReader::from_file(path);
  r.expect_magic("OV3D");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    fail(ErrorCode::VersionMismatch, "checkpoint version " + std::to_string(version) + " unsupported");
  }
  std::vector<ParamTensor<float>> tensors;
  while (!r.at_end()) {
    std::string name = r.string();
    const std::uint32_t rank = r.u32();
    require(rank <= 8, ErrorCode::Format, "checkpoint: implausible rank for " + name);
    std::vector<Index> shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.u32());
    ParamTensor<float> t(std::move(name), std::move(shape));
    require(static_cast<std::size_t>(t.size()) * 4 <= r.remaining(), ErrorCode::Truncated,
            "truncated: checkpoint tensor " + t.name);
    for (Index i = 0; i < t.size(); ++i) t.value(i) = r.f32();
    tensors.push_back(std::move(t));
  }
  auto take = [&](const std::string& name) {
    for (auto& t : tensors)
      if (t.name == name) return std::move(t);
    fail(ErrorCode::Format, "checkpoint: missing tensor " + name);
  };
  auto take_mlp = [&](const std::string& prefix) {
    std::vector<ParamTensor<float>> params;
    for (int l = 0;; ++l) {
      const std::string stem = prefix + "." + std::to_string(l);
      bool found = false;
      for (const auto& t : tensors) found = found || t.name == stem + ".weight";
      if (!found) break;
      params.push_back(take(stem + ".weight"));
      params.push_back(take(stem + ".bias"));
    }
    return Mlp<float>::from_params(std::move(params));
  };
  auto shared = take("shared");
  auto density = take("density");
  auto selection = take("selection");
  auto bbox = take("bbox");
  auto rgb = take_mlp("rgb_head");
  auto feature = take_mlp("feature_head");
  require(shared.shape.size() == 4 && density.shape.size() == 4 && selection.shape.size() == 4, ErrorCode::Format,
          "checkpoint: grid tensors must be rank 4");
  FieldConfig config;
  config.grid = Eigen::Array3i(static_cast<int>(shared.shape[0]), static_cast<int>(shared.shape[1]),
                               static_cast<int>(shared.shape[2]));
  config.appearance_channels = static_cast<int>(shared.shape[3]);
  config.n_scales = static_cast<int>(selection.shape[3]);
  config.feature_dim = feature.out_dim();
  config.hidden_width = static_cast<int>(feature.params()[0].shape[0]);
  config.hidden_layers = feature.layer_count() - 1;
  config.view_frequencies = (rgb.in_dim() - config.appearance_channels - 3) / 6;
  for (int a = 0; a < 3; ++a) {
    config.bbox.lo(a) = bbox.value(a);
    config.bbox.hi(a) = bbox.value(3 + a);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    require(density.shape[i] == shared.shape[i] && selection.shape[i] == shared.shape[i], ErrorCode::Format,
            "checkpoint: grid extents disagree");
  }
  require(rgb.in_dim() == config.appearance_channels + encoded_direction_dim(config.view_frequencies),
          ErrorCode::Format, "checkpoint: rgb head input width inconsistent");
  return FieldModel<float>::from_tensors(config, std::move(shared), std::move(density), std::move(selection),
                                         std::move(rgb), std::move(feature));
}

template class Mlp<float>;
template class Mlp<double>;
template class FieldModel<float>;
template class FieldModel<double>;
template VectorX<float> encode_direction<float>(const Eigen::Vector3d&, int);
template VectorX<double> encode_direction<double>(const Eigen::Vector3d&, int);
template Eigen::VectorXd pack_values(const FieldModel<float>&, GroupMask);
template Eigen::VectorXd pack_values(const FieldModel<double>&, GroupMask);
template void unpack_values(FieldModel<float>&, const Eigen::VectorXd&, GroupMask);
template void unpack_values(FieldModel<double>&, const Eigen::VectorXd&, GroupMask);
template Eigen::VectorXd pack_grads(const FieldModel<float>&, GroupMask);
template Eigen::VectorXd pack_grads(const FieldModel<double>&, GroupMask);

}  // namespace ov3d
