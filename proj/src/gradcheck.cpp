#include "fedmenu/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "fedmenu/errors.hpp"

namespace fedmenu {

namespace {

std::map<std::string, Var> bind_all(Tape& tape, const ParameterSet& point, bool requires_grad) {
  std::map<std::string, Var> leaves;
  for (const auto& [gid, group] : point.groups())
    for (const auto& [name, t] : group) leaves.emplace(gid + "/" + name, tape.leaf(t, requires_grad));
  return leaves;
}

double evaluate(const ScalarFn& fn, const ParameterSet& point) {
  Tape tape;
  double v = 0.0;
  try {
    const Var out = fn(tape, bind_all(tape, point, false));
    v = out.value().item();
  } catch (const NumericError& e) {
    throw OracleError(std::string("objective not finite at a perturbed point: ") + e.what());
  }
  if (!std::isfinite(v)) throw OracleError("objective not finite at a perturbed point");
  return v;
}

}  // namespace

GradCheckResult grad_check_detailed(const ScalarFn& fn, const ParameterSet& point, double step, std::size_t stride) {
  if (!(step >= 1e-6 && step <= 1e-3)) throw ConfigError("grad_check step must lie in [1e-6, 1e-3]");
  if (stride == 0) throw ConfigError("grad_check stride must be >= 1");
  GradCheckResult result;
  {
    Tape tape;
    const auto leaves = bind_all(tape, point, true);
    Var out;
    try {
      out = fn(tape, leaves);
    } catch (const NumericError& e) {
      throw OracleError(std::string("objective not finite: ") + e.what());
    }
    if (out.value().size() != 1) throw ContractError("grad_check objective must be a scalar");
    tape.backward(out);
    for (const auto& [name, var] : leaves) result.analytic.emplace(name, var.grad());
  }
  ParameterSet probe = point;
  for (const auto& [name, grad] : result.analytic) {
    Tensor& t = probe.at(name);
    for (std::size_t i = 0; i < t.size(); i += stride) {
      const double orig = t[i];
      t[i] = orig + step;
      const double up = evaluate(fn, probe);
      t[i] = orig - step;
      const double down = evaluate(fn, probe);
      t[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double err = std::abs(grad[i] - numeric) / std::max(1.0, std::abs(numeric));
      ++result.components;
      if (result.worst_name.empty() || err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_name = name;
        result.worst_index = i;
      }
    }
  }
  return result;
}

double grad_check(const ScalarFn& fn, const ParameterSet& point, double step) {
  return grad_check_detailed(fn, point, step).max_rel_error;
}

}  // namespace fedmenu
