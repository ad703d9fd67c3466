#include "msn/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "msn/tensor.hpp"

namespace msn {

GradCheckResult grad_check_subset(const std::function<double(std::span<const double>)>& f,
                                  std::span<const double> analytic_gradient, std::span<const double> x,
                                  std::span<const std::size_t> coordinates, const GradCheckOptions& options) {
  if (analytic_gradient.size() != x.size()) {
    throw ShapeError("grad_check: gradient has " + std::to_string(analytic_gradient.size()) +
                     " entries for a point of dimension " + std::to_string(x.size()));
  }
  std::vector<double> point(x.begin(), x.end());
  GradCheckResult result;
  for (std::size_t i : coordinates) {
    const double a = analytic_gradient[i];
    if (!std::isfinite(a)) throw NumericError("grad_check: non-finite analytic gradient at " + std::to_string(i));
    const auto estimate = [&](double scale) {
      const double h = scale * std::max(1.0, std::abs(x[i]));
      point[i] = x[i] + h;
      const double up = f(point);
      point[i] = x[i] - h;
      const double down = f(point);
      point[i] = x[i];
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("grad_check: non-finite function value at coordinate " + std::to_string(i));
      }
      const double numeric = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(a), std::abs(numeric), options.magnitude_floor});
      return std::pair{numeric, std::abs(a - numeric) / denom};
    };
    auto [numeric, rel] = estimate(options.eps_scale);
    for (double factor : options.refine_factors) {
      if (rel <= options.refine_above) break;
      const auto [n2, r2] = estimate(options.eps_scale * factor);
      if (r2 < rel) {
        numeric = n2;
        rel = r2;
      }
    }
    if (result.coordinates == 0 || rel > result.max_relative_error) {
      result.max_relative_error = rel;
      result.worst_index = i;
      result.worst_analytic = a;
      result.worst_numeric = numeric;
    }
    ++result.coordinates;
  }
  return result;
}

GradCheckResult grad_check(const std::function<double(std::span<const double>)>& f,
                           std::span<const double> analytic_gradient, std::span<const double> x,
                           const GradCheckOptions& options) {
  std::vector<std::size_t> all(x.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return grad_check_subset(f, analytic_gradient, x, all, options);
}

}  // namespace msn
