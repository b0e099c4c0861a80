#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ov3d/error.hpp"

namespace ov3d {

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector3 = Eigen::Matrix<Scalar, 3, 1>;

using Eigen::Index;

/// Guard for log arguments and norm denominators.
inline constexpr double kEps = 1e-10;

/// A trainable tensor: flat values plus a same-shape gradient accumulator.
/// Shapes are row-major.
template <typename Scalar>
struct ParamTensor {
  std::string name;
  std::vector<Index> shape;
  VectorX<Scalar> value;
  VectorX<Scalar> grad;

  ParamTensor() = default;
  ParamTensor(std::string tensor_name, std::vector<Index> tensor_shape)
      : name(std::move(tensor_name)), shape(std::move(tensor_shape)) {
    Index n = 1;
    for (Index e : shape) n *= e;
    value = VectorX<Scalar>::Zero(n);
    grad = VectorX<Scalar>::Zero(n);
  }

  Index size() const { return value.size(); }
  void zero_grad() { grad.setZero(); }
  bool finite() const { return value.allFinite(); }

  template <typename Other>
  ParamTensor<Other> cast() const {
    ParamTensor<Other> out;
    out.name = name;
    out.shape = shape;
    out.value = value.template cast<Other>();
    out.grad = grad.template cast<Other>();
    return out;
  }
};

// ---------------------------------------------------------------------------
// softmax

/// Softmax(logits / temperature) with max subtraction.
template <typename Derived>
VectorX<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits,
                                          typename Derived::Scalar temperature = 1) {
  using Scalar = typename Derived::Scalar;
  if (!(temperature > Scalar(0))) fail(ErrorCode::InvalidArgument, "softmax: temperature must be > 0");
  VectorX<Scalar> out(logits.size());
  if (logits.size() == 0) return out;
  const Scalar peak = logits.maxCoeff();
  out = ((logits.array() - peak) / temperature).exp().matrix();
  out /= out.sum();
  return out;
}

/// Vector-Jacobian product of softmax(z / t): maps dL/dp to dL/dz.
template <typename Scalar>
VectorX<Scalar> softmax_backward(const VectorX<Scalar>& probs, const VectorX<Scalar>& d_probs,
                                 Scalar temperature = 1) {
  const Scalar inner = probs.dot(d_probs);
  return (probs.array() * (d_probs.array() - inner) / temperature).matrix();
}

// ---------------------------------------------------------------------------
// cosine similarity

enum class ZeroNorm { Strict, Lenient };

/// a.b / (|a||b| + eps), clamped to [-1, 1]. A zero-norm input throws in
/// strict mode and yields 0 in lenient mode.
template <typename DA, typename DB>
typename DA::Scalar cosine_similarity(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b,
                                      ZeroNorm mode = ZeroNorm::Strict) {
  using Scalar = typename DA::Scalar;
  if (a.size() != b.size()) fail(ErrorCode::ShapeMismatch, "cosine_similarity: length mismatch");
  const Scalar na = a.norm();
  const Scalar nb = b.norm();
  if (na == Scalar(0) || nb == Scalar(0)) {
    if (mode == ZeroNorm::Strict) fail(ErrorCode::InvalidArgument, "cosine_similarity: zero-norm input");
    return Scalar(0);
  }
  const Scalar c = a.dot(b) / (na * nb + Scalar(kEps));
  return std::clamp(c, Scalar(-1), Scalar(1));
}

/// Gradient of cosine_similarity(a, b) with respect to a.
template <typename Scalar>
VectorX<Scalar> cosine_similarity_grad(const VectorX<Scalar>& a, const VectorX<Scalar>& b) {
  const Scalar na = a.norm();
  const Scalar nb = b.norm();
  if (na == Scalar(0) || nb == Scalar(0)) return VectorX<Scalar>::Zero(a.size());
  const Scalar den = na * nb + Scalar(kEps);
  const Scalar dot = a.dot(b);
  return b / den - (dot * nb / (den * den * na)) * a;
}

// ---------------------------------------------------------------------------
// Jensen-Shannon divergence (base 2)

namespace detail {

/// p * log2(p / m) with the 0 log 0 = 0 convention.
template <typename Scalar>
Scalar js_term(Scalar p, Scalar m) {
  if (p <= Scalar(0)) return Scalar(0);
  using std::log2;
  using std::max;
  return p * log2(max(p, Scalar(kEps)) / max(m, Scalar(kEps)));
}

/// Per-class symmetric contribution, clamped at zero (the exact value is
/// non-negative by the log-sum inequality; clamping removes rounding noise).
template <typename Scalar>
Scalar js_class_term(Scalar p, Scalar q) {
  const Scalar m = (p + q) / Scalar(2);
  const Scalar t = (js_term(p, m) + js_term(q, m)) / Scalar(2);
  return t > Scalar(0) ? t : Scalar(0);
}

template <typename Scalar>
Scalar js_class_grad(Scalar p, Scalar q) {
  using std::log2;
  using std::max;
  const Scalar m = (p + q) / Scalar(2);
  return log2(max(p, Scalar(kEps)) / max(m, Scalar(kEps))) / Scalar(2);
}

}  // namespace detail

/// Sum over classes of the JS integrand, without requiring normalization.
/// This is the raw form used by the relevancy alignment loss.
template <typename DA, typename DB>
typename DA::Scalar js_terms(const Eigen::MatrixBase<DA>& p, const Eigen::MatrixBase<DB>& q) {
  using Scalar = typename DA::Scalar;
  if (p.size() != q.size()) fail(ErrorCode::InvalidArgument, "js_divergence: length mismatch");
  Scalar total = 0;
  for (Index c = 0; c < p.size(); ++c) total += detail::js_class_term<Scalar>(p(c), q(c));
  return total;
}

/// Jensen-Shannon divergence of two probability vectors, base 2, in [0, 1].
template <typename DA, typename DB>
typename DA::Scalar js_divergence(const Eigen::MatrixBase<DA>& p, const Eigen::MatrixBase<DB>& q) {
  using Scalar = typename DA::Scalar;
  return std::min(js_terms(p, q), Scalar(1));
}

/// dJS/dp (the gradient with respect to q follows by symmetry).
template <typename DA, typename DB>
VectorX<typename DA::Scalar> js_divergence_grad(const Eigen::MatrixBase<DA>& p,
                                                const Eigen::MatrixBase<DB>& q) {
  using Scalar = typename DA::Scalar;
  VectorX<Scalar> g(p.size());
  for (Index c = 0; c < p.size(); ++c) g(c) = detail::js_class_grad<Scalar>(p(c), q(c));
  return g;
}

/// True when every entry lies in [0, 1] and the sum is 1 within `tol`.
template <typename Derived>
bool is_prob_vec(const Eigen::MatrixBase<Derived>& v, double tol = 1e-6) {
  using Scalar = typename Derived::Scalar;
  if (v.size() == 0 || !v.allFinite()) return false;
  if ((v.array() < Scalar(0)).any() || (v.array() > Scalar(1)).any()) return false;
  return std::abs(static_cast<double>(v.sum()) - 1.0) <= tol;
}

template <typename Derived>
void require_prob_vec(const Eigen::MatrixBase<Derived>& v, const char* what) {
  if (!is_prob_vec(v)) fail(ErrorCode::InvalidArgument, std::string(what) + ": not a probability vector");
}

// ---------------------------------------------------------------------------
// clamps

template <typename Derived>
auto clamp_min0(const Eigen::ArrayBase<Derived>& t) {
  return t.max(typename Derived::Scalar(0));
}

template <typename Derived>
auto clamp_max0(const Eigen::ArrayBase<Derived>& t) {
  return t.min(typename Derived::Scalar(0));
}

/// Gradient mask of the clamps: 1 on pass-through entries, 0 on clamped ones.
template <typename Derived>
auto clamp_min0_mask(const Eigen::ArrayBase<Derived>& t) {
  using Scalar = typename Derived::Scalar;
  return (t > Scalar(0)).template cast<Scalar>();
}

template <typename Derived>
auto clamp_max0_mask(const Eigen::ArrayBase<Derived>& t) {
  using Scalar = typename Derived::Scalar;
  return (t < Scalar(0)).template cast<Scalar>();
}

// ---------------------------------------------------------------------------
// finite differences

struct FdCheckResult {
  double max_rel_error = 0;
  Index worst_coordinate = -1;
  double analytic = 0;
  double numeric = 0;
};

/// Compares `analytic` with central differences of `f` around `point`.
/// Only the listed coordinates are probed when `coordinates` is non-empty.
/// Relative error is |a - n| / max(1e-8, |n|).
FdCheckResult finite_difference_check(const std::function<double(const Eigen::VectorXd&)>& f,
                                      const Eigen::VectorXd& analytic, const Eigen::VectorXd& point,
                                      double step, const std::vector<Index>& coordinates = {});

}  // namespace ov3d
