#include "hpnet/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace hpnet {

namespace {
double eval_loss(const std::function<Tensor()>& loss_fn) {
  NoGradGuard guard;
  const double v = loss_fn().item();
  if (!std::isfinite(v)) throw NumericError("grad_check: loss is not finite");
  return v;
}
}  // namespace

GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                           double step) {
  if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tensor loss = loss_fn();
  if (!std::isfinite(loss.item())) throw NumericError("grad_check: loss is not finite");
  backward(loss);

  GradCheckResult result;
  bool first = true;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto data = p.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + step;
      const double up = eval_loss(loss_fn);
      data[i] = saved - step;
      const double down = eval_loss(loss_fn);
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double err =
          std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
      if (first || err > result.max_relative_error) {
        result = {err, pi, i, analytic[i], numeric};
        first = false;
      }
    }
  }
  return result;
}

}  // namespace hpnet
