#include "planet/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace planet {

GradCheckReport finite_diff_check(const LossWithGrad& loss_fn, const ParamSet<double>& params,
                                  double h, int coords_per_param, RngStream rng) {
  check_arg(h >= 1e-6 && h <= 1e-3, "finite_diff_check: h must lie in [1e-6, 1e-3]");
  check_arg(coords_per_param > 0, "finite_diff_check: coords_per_param must be positive");

  GradCheckReport report;
  ParamSet<double> analytic;
  const double base = loss_fn(params, &analytic);
  if (!std::isfinite(base)) {
    report.loss_finite = false;
    return report;
  }

  ParamSet<double> work = params;
  for (const auto& [name, p] : params) {
    auto git = analytic.find(name);
    check_arg(git != analytic.end(), "finite_diff_check: no analytic gradient for " + name);
    check_arg(git->second.shape == p.shape,
              "finite_diff_check: analytic gradient shape mismatch for " + name);

    const int64_t n = p.numel();
    std::vector<int64_t> coords;
    if (n <= coords_per_param) {
      coords.resize(size_t(n));
      for (int64_t i = 0; i < n; ++i) coords[size_t(i)] = i;
    } else {
      RngStream sub = rng.child(name);
      for (int i = 0; i < coords_per_param; ++i)
        coords.push_back(int64_t(sub.uniform_int(uint64_t(n))));
      std::sort(coords.begin(), coords.end());
      coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    }

    double param_max = 0.0;
    Tensor<double>& w = work.at(name);
    for (int64_t idx : coords) {
      const double saved = w[idx];
      w[idx] = saved + h;
      const double fp = loss_fn(work, nullptr);
      w[idx] = saved - h;
      const double fm = loss_fn(work, nullptr);
      w[idx] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        report.loss_finite = false;
        return report;
      }
      GradCheckSample s;
      s.name = name;
      s.index = idx;
      s.analytic = git->second[idx];
      s.numeric = (fp - fm) / (2.0 * h);
      const double denom =
          std::max({std::abs(s.analytic), std::abs(s.numeric), GradCheckReport::kDenomEps});
      s.rel_err = std::abs(s.analytic - s.numeric) / denom;
      param_max = std::max(param_max, s.rel_err);
      report.samples.push_back(std::move(s));
    }
    report.max_rel_err_per_param[name] = param_max;
    if (param_max > report.max_rel_err) {
      report.max_rel_err = param_max;
      report.worst_param = name;
    }
  }
  return report;
}

}  // namespace planet
