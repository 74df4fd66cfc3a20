#ifndef LVC_TESTS_GRADCHECK_HPP
#define LVC_TESTS_GRADCHECK_HPP

#include <cmath>
#include <functional>
#include <vector>

#include "latentvision/autodiff.hpp"
#include "latentvision/random.hpp"

namespace lvc::testing {

// Compares the analytic gradient of a scalar loss with central finite
// differences over a subset of the parameter's entries. Returns the worst
// relative error.
inline double gradcheck(const std::function<Var()>& loss_fn, const Var& param,
                        int max_entries = 10, double eps = 1e-5,
                        uint64_t seed = 7) {
  Var loss = loss_fn();
  if (!param->grad.empty()) param->grad.fill(0.0);
  backward(loss);
  Tensor analytic = param->grad;

  Rng rng(seed);
  std::vector<int64_t> picks;
  int64_t n = param->value.size();
  for (int i = 0; i < max_entries; ++i) picks.push_back(rng.uniform_int(n));

  double worst = 0;
  for (int64_t j : picks) {
    double orig = param->value[j];
    param->value[j] = orig + eps;
    double up = loss_fn()->value[0];
    param->value[j] = orig - eps;
    double dn = loss_fn()->value[0];
    param->value[j] = orig;
    double numeric = (up - dn) / (2 * eps);
    double denom = std::max({std::fabs(numeric), std::fabs(analytic[j]), 1e-8});
    worst = std::max(worst, std::fabs(numeric - analytic[j]) / denom);
  }
  return worst;
}

}  // namespace lvc::testing

#endif
