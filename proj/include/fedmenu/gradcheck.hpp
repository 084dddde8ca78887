#pragma once

#include <functional>
#include <map>
#include <string>

#include "fedmenu/autograd.hpp"
#include "fedmenu/params.hpp"

namespace fedmenu {

/// Scalar objective built on `tape` from leaves keyed by full parameter name.
using ScalarFn = std::function<Var(Tape& tape, const std::map<std::string, Var>& leaves)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_name;
  std::size_t worst_index = 0;
  std::size_t components = 0;
  std::map<std::string, Tensor> analytic;
};

/// Compares reverse-mode gradients with central differences of step `step` in [1e-6, 1e-3].
/// The error of a component is |analytic - numeric| / max(1, |numeric|).
/// `stride` > 1 checks every stride-th component of each tensor (always including the first).
/// Throws OracleError when an evaluation is not finite.
GradCheckResult grad_check_detailed(const ScalarFn& fn, const ParameterSet& point, double step,
                                    std::size_t stride = 1);

double grad_check(const ScalarFn& fn, const ParameterSet& point, double step);

}  // namespace fedmenu
