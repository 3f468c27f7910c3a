#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "planet/params.hpp"
#include "planet/rng.hpp"
#include "planet/tensor.hpp"

namespace planet {

struct GradCheckSample {
  std::string name;
  int64_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  std::map<std::string, double> max_rel_err_per_param;
  std::vector<GradCheckSample> samples;
  double max_rel_err = 0.0;
  std::string worst_param;
  bool loss_finite = true;

  static constexpr double kDenomEps = 1e-8;
};

// Loss with analytic gradients, evaluated in double precision. The function
// must be deterministic given the parameter values (sampling noise frozen by
// the caller). When `grads` is non-null it receives d(loss)/d(param) for
// every entry.
using LossWithGrad = std::function<double(const ParamSet<double>&, ParamSet<double>* grads)>;

// Central differences (f(x+h)-f(x-h))/2h against the analytic gradient on up
// to `coords_per_param` sampled coordinates per parameter (all coordinates
// when the array is small enough). Relative error uses
// |ga-gn| / max(|ga|, |gn|, 1e-8). A non-finite loss aborts the sweep and is
// flagged on the report.
GradCheckReport finite_diff_check(const LossWithGrad& loss_fn, const ParamSet<double>& params,
                                  double h, int coords_per_param, RngStream rng);

}  // namespace planet
