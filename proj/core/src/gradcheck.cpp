#include "mmfusion/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace mmfusion {

template <Real T>
T evaluate(const Objective<T>& objective, ParamStore<T>& params) {
  Tape<T> tape(/*record=*/false);
  Var<T> root = objective(tape, params);
  if (root.numel() != 1) throw ShapeError("objective must return a scalar, got " + shape_string(root.dims()));
  return root.value()[0];
}

namespace {

bool selected(const std::string& name, const std::vector<std::string>& prefixes) {
  if (prefixes.empty()) return true;
  return std::any_of(prefixes.begin(), prefixes.end(),
                     [&](const std::string& p) { return name.rfind(p, 0) == 0; });
}

}  // namespace

template <Real T>
GradCheckReport grad_check(const Objective<T>& objective, ParamStore<T>& params,
                           const GradCheckOptions& options) {
  const T base = evaluate(objective, params);
  const T again = evaluate(objective, params);
  if (!(base == again)) {
    throw OracleError("objective is not deterministic: " + std::to_string(base) + " vs " +
                      std::to_string(again));
  }
  if (!std::isfinite(base)) throw NumericError("objective is not finite at the check point");

  params.zero_grad();
  {
    Tape<T> tape;
    Var<T> root = objective(tape, params);
    tape.backward(root);
  }

  GradCheckReport report;
  report.pass = true;
  for (auto& [name, entry] : params.entries()) {
    if (!selected(name, options.prefixes)) continue;
    GradCheckEntry row;
    row.name = name;
    row.scalars = entry.value.numel();
    for (std::size_t i = 0; i < entry.value.numel(); ++i) {
      const T saved = entry.value[i];
      entry.value[i] = saved + static_cast<T>(options.step);
      const double plus = evaluate(objective, params);
      entry.value[i] = saved - static_cast<T>(options.step);
      const double minus = evaluate(objective, params);
      entry.value[i] = saved;

      const double numeric = (plus - minus) / (2.0 * options.step);
      double analytic = entry.grad[i];
      if (options.corrupt && *options.corrupt == name && i == 0) analytic += options.corrupt_offset;
      const double abs_err = std::abs(analytic - numeric);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), options.floor});
      const double rel_err = std::isfinite(abs_err) ? abs_err / denom : INFINITY;
      if (rel_err > row.max_rel_error || !std::isfinite(rel_err)) {
        row.max_rel_error = rel_err;
        row.worst_index = i;
      }
      row.max_abs_error = std::max(row.max_abs_error, abs_err);
      ++report.checked;
    }
    if (!(row.max_rel_error < options.tolerance)) report.pass = false;
    if (report.worst_name.empty() || row.max_rel_error > report.max_rel_error ||
        !std::isfinite(row.max_rel_error)) {
      report.max_rel_error = row.max_rel_error;
      report.worst_name = row.name;
      report.worst_index = row.worst_index;
    }
    report.entries.push_back(std::move(row));
  }
  if (report.checked == 0) report.pass = false;
  return report;
}

template float evaluate(const Objective<float>&, ParamStore<float>&);
template double evaluate(const Objective<double>&, ParamStore<double>&);
template GradCheckReport grad_check(const Objective<float>&, ParamStore<float>&, const GradCheckOptions&);
template GradCheckReport grad_check(const Objective<double>&, ParamStore<double>&, const GradCheckOptions&);

}  // namespace mmfusion
