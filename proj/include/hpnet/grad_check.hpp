#pragma once

#include <functional>
#include <vector>

#include "hpnet/tensor.hpp"

namespace hpnet {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares reverse-mode gradients of loss_fn against central differences.
///
/// loss_fn must rebuild the graph from the current parameter values on
/// every call. Relative error per element is
/// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
/// Throws NumericError if any evaluated loss is not finite.
GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                           double step = 1e-5);

}  // namespace hpnet
