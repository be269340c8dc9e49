#pragma once

#include <functional>

#include "mmfuse/tensor.hpp"

namespace mmfuse {

// Central-difference check of d(f)/d(x) against the tape.
//
// f must be scalar-valued. Returns the max over coordinates of
// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double eps = 1e-5) {
  Tensor leaf = x.detached(/*requires_grad=*/true);
  Tensor out = f(leaf);
  if (out.size() != 1) {
    throw ContractError("grad_check: f must be scalar-valued, got shape " + shape_str(out.shape()));
  }
  backward(out);
  std::vector<double> analytic = leaf.has_grad() ? leaf.grad() : std::vector<double>(x.size(), 0.0);

  double worst = 0.0;
  std::vector<double> probe = x.data();
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    double saved = probe[i];
    probe[i] = saved + eps;
    double hi = f(Tensor::from_data(x.shape(), probe)).value();
    probe[i] = saved - eps;
    double lo = f(Tensor::from_data(x.shape(), probe)).value();
    probe[i] = saved;
    double numeric = (hi - lo) / (2.0 * eps);
    double denom = std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace mmfuse
