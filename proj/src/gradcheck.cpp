#include "hvp/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "hvp/rng.hpp"

namespace hvp {

GradCheckReport finite_diff_check(const std::vector<Param*>& params,
                                  const std::function<double(bool)>& loss,
                                  int min_coords, double eps, uint64_t seed) {
  double base = loss(true);
  if (!std::isfinite(base)) {
    throw std::runtime_error("gradient check: loss is non-finite at the base point");
  }
  for (Param* p : params) {
    if (!p->grad.all_finite()) {
      throw std::runtime_error("gradient check: non-finite gradient in group " + p->name);
    }
  }

  std::mt19937_64 rng(seed);
  GradCheckReport report;
  for (Param* p : params) {
    GradCheckGroup group;
    group.name = p->name;
    int64_t n = p->value.numel();
    std::vector<int64_t> coords;
    if (n <= min_coords) {
      for (int64_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      std::vector<int64_t> all(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
      rng_shuffle(rng, all);
      coords.assign(all.begin(), all.begin() + min_coords);
    }
    for (int64_t i : coords) {
      auto central = [&](double h) {
        double keep = p->value[i];
        p->value[i] = keep + h;
        double up = loss(false);
        p->value[i] = keep - h;
        double dn = loss(false);
        p->value[i] = keep;
        if (!std::isfinite(up) || !std::isfinite(dn)) {
          throw std::runtime_error("gradient check: non-finite loss while perturbing group " +
                                   p->name);
        }
        return (up - dn) / (2.0 * h);
      };
      double analytic = p->grad[i];
      auto rel_err = [&](double numeric) {
        return std::fabs(analytic - numeric) /
               std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
      };
      double rel = rel_err(central(eps));
      // The finite-difference error is U-shaped in the step size (roundoff below,
      // truncation and kink straddling above), so no single step suits every
      // coordinate; a wrong analytic gradient disagrees at every step size.
      if (rel > 1e-6) {
        rel = std::min(rel, rel_err(central(eps * 10.0)));
        rel = std::min(rel, rel_err(central(eps * 0.1)));
      }
      ++group.checked;
      if (rel > group.max_rel_err) {
        group.max_rel_err = rel;
        group.worst_index = i;
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, group.max_rel_err);
    report.groups.push_back(std::move(group));
  }
  return report;
}

}  // namespace hvp
