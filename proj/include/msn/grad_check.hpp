#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace msn {

struct GradCheckOptions {
  /// Step is eps_scale * max(1, |x_i|).
  double eps_scale = 1e-5;
  /// Denominator floor for the relative error, so coordinates whose true
  /// gradient is ~0 are judged on absolute error instead.
  double magnitude_floor = 1e-6;
  /// A coordinate whose error exceeds refine_above is re-estimated with the
  /// step scaled by each factor in turn, keeping the best agreement. This
  /// separates a step straddling a ReLU or max-pool kink from a wrong gradient.
  std::vector<double> refine_factors;
  double refine_above = 1e-4;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Compares an analytic gradient against central finite differences,
/// (f(x + h e_i) - f(x - h e_i)) / 2h, for every coordinate of x.
///
/// Relative error per coordinate is |a - n| / max(|a|, |n|, magnitude_floor).
/// Throws NumericError when f or the analytic gradient is non-finite.
GradCheckResult grad_check(const std::function<double(std::span<const double>)>& f,
                           std::span<const double> analytic_gradient, std::span<const double> x,
                           const GradCheckOptions& options = {});

/// Same as grad_check, restricted to the listed coordinates.
GradCheckResult grad_check_subset(const std::function<double(std::span<const double>)>& f,
                                  std::span<const double> analytic_gradient, std::span<const double> x,
                                  std::span<const std::size_t> coordinates, const GradCheckOptions& options = {});

}  // namespace msn
