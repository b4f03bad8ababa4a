#pragma once

#include <functional>
#include <string>
#include <vector>

#include "c2f/array.hpp"
#include "c2f/tape.hpp"

namespace c2f {

struct BlockReport {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t non_finite = 0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<BlockReport> blocks;
  double max_rel_error = 0.0;
  bool passed = true;
};

/// Scalar objective built on a fresh tape from its parameter leaves.
using TapeObjective = std::function<Var(Tape&, const std::vector<Var>& params)>;
/// Plain evaluation at a parameter point.
using ValueObjective = std::function<double(const std::vector<Array>& params)>;

/// Relative error |a - b| / max(|a|, |b|, 1e-8).
double relative_error(double analytic, double numeric);

/// Compares supplied analytic gradients against central differences of f.
GradCheckReport compare_gradients(const ValueObjective& f, const std::vector<Array>& params,
                                  const std::vector<Array>& analytic, double eps, double tol,
                                  const std::vector<std::string>& names = {});

/// Runs f once on a tape for the analytic gradients, then checks every
/// coordinate with central differences of step eps.
GradCheckReport finite_diff_check(const TapeObjective& f, const std::vector<Array>& params, double eps,
                                  double tol, const std::vector<std::string>& names = {});

}  // namespace c2f
