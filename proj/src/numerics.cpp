#include "ov3d/numerics.hpp"

#include <cmath>

namespace ov3d {

FdCheckResult finite_difference_check(const std::function<double(const Eigen::VectorXd&)>& f,
                                      const Eigen::VectorXd& analytic, const Eigen::VectorXd& point,
                                      double step, const std::vector<Index>& coordinates) {
  require(step > 0, ErrorCode::InvalidArgument, "finite_difference_check: step must be > 0");
  require(analytic.size() == point.size(), ErrorCode::ShapeMismatch,
          "finite_difference_check: gradient/point size mismatch");
  std::vector<Index> probe = coordinates;
  if (probe.empty()) {
    probe.resize(static_cast<std::size_t>(point.size()));
    for (Index i = 0; i < point.size(); ++i) probe[static_cast<std::size_t>(i)] = i;
  }
  FdCheckResult result;
  Eigen::VectorXd x = point;
  for (Index i : probe) {
    const double saved = x(i);
    x(i) = saved + step;
    const double fp = f(x);
    x(i) = saved - step;
    const double fm = f(x);
    x(i) = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      fail(ErrorCode::Numerical, "finite_difference_check: non-finite value at coordinate " + std::to_string(i));
    }
    const double numeric = (fp - fm) / (2.0 * step);
    const double rel = std::abs(analytic(i) - numeric) / std::max(1e-8, std::abs(numeric));
    if (rel > result.max_rel_error || result.worst_coordinate < 0) {
      result.max_rel_error = rel;
      result.worst_coordinate = i;
      result.analytic = analytic(i);
      result.numeric = numeric;
    }
  }
  return result;
}

}  // namespace ov3d
