#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mmfusion/autograd.hpp"

namespace mmfusion {

/// A scalar objective over a ParamStore. It must build its graph on the given
/// tape (fetching parameters through Tape::param) and return the scalar root.
template <Real T>
using Objective = std::function<Var<T>(Tape<T>&, ParamStore<T>&)>;

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-5;
  /// Lower bound of the relative-error denominator.
  double floor = 1e-4;
  /// Restrict the check to parameters whose name starts with one of these prefixes.
  std::vector<std::string> prefixes;
  /// Test hook: offset the analytic gradient of element 0 of this parameter.
  std::optional<std::string> corrupt;
  double corrupt_offset = 1.0;
};

struct GradCheckEntry {
  std::string name;
  std::size_t scalars = 0;
  double max_rel_error = 0;
  double max_abs_error = 0;
  std::size_t worst_index = 0;
};

struct GradCheckReport {
  double max_rel_error = 0;
  std::string worst_name;
  std::size_t worst_index = 0;
  bool pass = false;
  std::size_t checked = 0;
  std::vector<GradCheckEntry> entries;
};

/// Central-difference comparison of every selected scalar parameter's analytic
/// gradient. Relative error is |a - n| / max(|a|, |n|, floor); the check passes
/// when every error is strictly below the tolerance. Throws OracleError if the
/// objective is not reproducible at the unperturbed point.
template <Real T>
GradCheckReport grad_check(const Objective<T>& objective, ParamStore<T>& params,
                           const GradCheckOptions& options = {});

/// Forward-only evaluation of an objective.
template <Real T>
T evaluate(const Objective<T>& objective, ParamStore<T>& params);

}  // namespace mmfusion
