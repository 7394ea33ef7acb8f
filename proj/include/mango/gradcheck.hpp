#pragma once
// Central finite-difference verification of recorded gradients.

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mango/autodiff.hpp"

namespace mango {

struct GradCheckOptions {
  double h = 1e-3;
  double tol = 1e-4;
  int samples_per_param = 5;
  uint64_t seed = 0;
};

struct GradCheckFailure {
  std::string param;
  int64_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  bool pass = false;
  // False when two evaluations of f at the same point differ bit-for-bit;
  // the check is invalid in that case.
  bool deterministic = true;
  double max_rel_err = 0.0;
  int coordinates_checked = 0;
  std::vector<GradCheckFailure> failures;
};

// f(with_grad) evaluates the scalar objective from the parameters' current
// values; when with_grad is true it must also run backward so gradients land
// in the parameters. The harness perturbs sampled coordinates one at a time
// and compares (f(x+h) - f(x-h)) / 2h against the recorded gradient.
GradCheckReport finite_difference_check(const std::function<double(bool)>& f,
                                        std::span<ad::Parameter* const> params,
                                        const GradCheckOptions& options);

}  // namespace mango
