// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "core/tensor.hpp"

namespace pqat {

// Central-difference gradient verification. `forward` must recompute the
// scalar loss from the current leaf values; it is called repeatedly with
// individual entries of `leaf` displaced by +/-step. The analytic gradient is
// read from leaf->grad, so run a forward+backward pass before calling.
//
// Returns |analytic - numeric|_2 / max(|analytic|_2 + |numeric|_2, 1e-12)
// for the leaf; finite_diff_check_many returns the worst ratio over leaves.
double finite_diff_check(const std::function<double()>& forward, const TensorPtr& leaf,
                         double step);

double finite_diff_check_many(const std::function<double()>& forward,
                              const std::vector<TensorPtr>& leaves, double step);

}  // namespace pqat
