#include "tpt/grad_check.hpp"

#include "tpt/errors.hpp"

#include <algorithm>
#include <cmath>

namespace tpt {
namespace {

double evaluate(const ScalarFn& f, const ParamMap& params) {
  Tape tape;
  VarMap vars;
  for (const auto& [name, value] : params) vars.emplace(name, tape.parameter(value, name, false));
  return f(tape, vars).value().item();
}

}  // namespace

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const ScalarFn& f, ParamMap& params, double eps) {
  std::map<std::string, Tensor> analytic;
  {
    Tape tape;
    VarMap vars;
    for (const auto& [name, value] : params) vars.emplace(name, tape.parameter(value, name));
    const Var loss = f(tape, vars);
    analytic = tape.backward(loss);
  }

  GradCheckReport report;
  for (auto& [name, value] : params) {
    const Tensor& grad = analytic.at(name);
    for (Index i = 0; i < value.size(); ++i) {
      const double saved = value[i];
      value[i] = saved + eps;
      const double up = evaluate(f, params);
      value[i] = saved - eps;
      const double down = evaluate(f, params);
      value[i] = saved;

      const double numeric = (up - down) / (2.0 * eps);
      if (std::isnan(numeric) || std::isnan(grad[i])) {
        throw NumericalError("grad_check: NaN gradient estimate for " + name + "[" + std::to_string(i) + "]");
      }
      const double err = relative_error(grad[i], numeric);
      ++report.coordinates;
      if (err > report.max_rel_error || report.worst_index < 0) {
        report.max_rel_error = err;
        report.worst_param = name;
        report.worst_index = i;
        report.worst_analytic = grad[i];
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace tpt
