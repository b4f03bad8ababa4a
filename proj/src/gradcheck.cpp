#include "c2f/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace c2f {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
  return std::fabs(analytic - numeric) / denom;
}

GradCheckReport compare_gradients(const ValueObjective& f, const std::vector<Array>& params,
                                  const std::vector<Array>& analytic, double eps, double tol,
                                  const std::vector<std::string>& names) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_check: eps must be > 0");
  if (analytic.size() != params.size()) {
    throw std::invalid_argument("finite_diff_check: gradient count does not match parameter count");
  }
  GradCheckReport report;
  std::vector<Array> point = params;
  for (std::size_t b = 0; b < params.size(); ++b) {
    if (analytic[b].shape() != params[b].shape()) {
      throw std::invalid_argument("finite_diff_check: gradient shape mismatch in block " + std::to_string(b));
    }
    BlockReport block;
    block.name = b < names.size() ? names[b] : "param" + std::to_string(b);
    for (std::size_t i = 0; i < params[b].size(); ++i) {
      const double orig = params[b][i];
      point[b][i] = orig + eps;
      const double up = f(point);
      point[b][i] = orig - eps;
      const double down = f(point);
      point[b][i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      if (!std::isfinite(numeric) || !std::isfinite(analytic[b][i])) {
        ++block.non_finite;
        block.passed = false;
        continue;
      }
      const double err = relative_error(analytic[b][i], numeric);
      if (err > block.max_rel_error) {
        block.max_rel_error = err;
        block.worst_index = i;
      }
    }
    if (block.max_rel_error >= tol) block.passed = false;
    report.max_rel_error = std::max(report.max_rel_error, block.max_rel_error);
    report.passed = report.passed && block.passed;
    report.blocks.push_back(std::move(block));
  }
  return report;
}

GradCheckReport finite_diff_check(const TapeObjective& f, const std::vector<Array>& params, double eps,
                                  double tol, const std::vector<std::string>& names) {
  std::vector<Array> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Array& p : params) vars.push_back(tape.parameter(p));
    analytic = backward(tape, f(tape, vars));
  }
  const ValueObjective value = [&f](const std::vector<Array>& point) {
    Tape tape;
    std::vector<Var> vars;
    for (const Array& p : point) vars.push_back(tape.constant(p));
    return f(tape, vars).value().item();
  };
  return compare_gradients(value, params, analytic, eps, tol, names);
}

}  // namespace c2f
