#include "mango/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mango/rng.hpp"

namespace mango {

GradCheckReport finite_difference_check(const std::function<double(bool)>& f,
                                        std::span<ad::Parameter* const> params,
                                        const GradCheckOptions& options) {
  if (!(options.h > 0.0 && options.h <= 1e-1)) {
    throw std::invalid_argument("finite_difference_check: h must be in (0, 1e-1]");
  }
  GradCheckReport report;

  const double v1 = f(false);
  const double v2 = f(false);
  if (v1 != v2) {
    report.deterministic = false;
    report.pass = false;
    return report;
  }

  for (ad::Parameter* p : params) p->zero_grad();
  f(true);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (ad::Parameter* p : params) analytic.push_back(p->grad);

  Rng rng(options.seed);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    ad::Parameter& p = *params[pi];
    const int64_t n = p.size();
    std::vector<int64_t> coords;
    if (n <= options.samples_per_param) {
      for (int64_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (int s = 0; s < options.samples_per_param; ++s) {
        coords.push_back(static_cast<int64_t>(rng.below(static_cast<uint64_t>(n))));
      }
      std::sort(coords.begin(), coords.end());
      coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    }
    for (int64_t idx : coords) {
      const double saved = p.value[static_cast<size_t>(idx)];
      p.value[static_cast<size_t>(idx)] = saved + options.h;
      const double up = f(false);
      p.value[static_cast<size_t>(idx)] = saved - options.h;
      const double down = f(false);
      p.value[static_cast<size_t>(idx)] = saved;
      const double numeric = (up - down) / (2.0 * options.h);
      const double a = analytic[pi][static_cast<size_t>(idx)];
      const double rel = std::fabs(a - numeric) /
                         std::max(std::fabs(a) + std::fabs(numeric), 1e-6);
      report.max_rel_err = std::max(report.max_rel_err, rel);
      report.coordinates_checked += 1;
      if (rel >= options.tol) {
        report.failures.push_back({p.name, idx, a, numeric, rel});
      }
    }
  }
  report.pass = report.failures.empty() && report.coordinates_checked > 0;
  return report;
}

}  // namespace mango
