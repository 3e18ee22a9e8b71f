#pragma once

#include "tpt/tape.hpp"

#include <functional>
#include <map>
#include <string>

namespace tpt {

using ParamMap = std::map<std::string, Tensor>;
using VarMap = std::map<std::string, Var>;

/// A scalar function of named parameters, recorded on the given tape.
using ScalarFn = std::function<Var(Tape&, const VarMap&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  Index worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Compares backward() against central differences
/// (f(p + eps) - f(p - eps)) / (2 eps) for every coordinate of every
/// parameter. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
/// denominator. `params` is perturbed in place and restored before return.
/// Throws NumericalError naming the parameter if either estimate is NaN.
GradCheckReport grad_check(const ScalarFn& f, ParamMap& params, double eps = 1e-5);

/// Single relative-error term used by grad_check.
double relative_error(double analytic, double numeric);

}  // namespace tpt
