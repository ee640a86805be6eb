#pragma once

#include "attmil/autodiff.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace attmil {

/// Scalar-valued function of trainable leaves.
using ScalarFn = std::function<Var(std::span<const Var> params)>;

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t param = 0;  // location of the worst element
  Index element = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares reverse-mode gradients of `f` against central differences
/// (f(x+h) - f(x-h)) / 2h for every element of every parameter. The relative
/// error uses max(|analytic|, |numeric|, 1e-8) as denominator.
GradcheckResult gradcheck(const ScalarFn& f, const std::vector<Tensor>& params, double h = 1e-6);

struct GradcheckCase {
  std::string name;
  std::function<GradcheckResult()> run;
};

struct GradcheckOutcome {
  std::string name;
  GradcheckResult result;
  bool passed = false;
};

/// Per-op checks on randomised small inputs (kink points of relu/maxpool avoided).
/// With `flip_tanh_backward` the tanh case uses a deliberately wrong backward
/// rule; the suite must then report it as failing.
std::vector<GradcheckCase> tensorcore_gradcheck_cases(std::uint64_t seed = 7, bool flip_tanh_backward = false);

std::vector<GradcheckOutcome> run_gradcheck_cases(const std::vector<GradcheckCase>& cases,
                                                  double tolerance = 1e-4);

}  // namespace attmil
