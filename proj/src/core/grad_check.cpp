// SPDX-License-Identifier: Apache-2.0
#include "core/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pqat {

double finite_diff_check(const std::function<double()>& forward, const TensorPtr& leaf,
                         double step) {
  if (step <= 0.0) throw std::invalid_argument("finite_diff_check: step must be positive");
  double diff_sq = 0.0, analytic_sq = 0.0, numeric_sq = 0.0;
  for (std::size_t i = 0; i < leaf->numel(); ++i) {
    const double saved = leaf->values[i];
    leaf->values[i] = saved + step;
    const double up = forward();
    leaf->values[i] = saved - step;
    const double down = forward();
    leaf->values[i] = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double analytic = leaf->grad[i];
    diff_sq += (analytic - numeric) * (analytic - numeric);
    analytic_sq += analytic * analytic;
    numeric_sq += numeric * numeric;
  }
  const double denom = std::max(std::sqrt(analytic_sq) + std::sqrt(numeric_sq), 1e-12);
  return std::sqrt(diff_sq) / denom;
}

double finite_diff_check_many(const std::function<double()>& forward,
                              const std::vector<TensorPtr>& leaves, double step) {
  double worst = 0.0;
  for (const auto& leaf : leaves) worst = std::max(worst, finite_diff_check(forward, leaf, step));
  return worst;
}

}  // namespace pqat
