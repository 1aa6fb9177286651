#include "sbattn/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "sbattn/errors.hpp"

namespace sbattn {

namespace {

double evaluate(const std::function<Var(Tape&)>& fn, const std::string& name, std::size_t index) {
  Tape tape;
  double v = 0.0;
  try {
    v = fn(tape).value().item();
  } catch (const NumericError& e) {
    throw NumericError("grad_check probe at " + name + "[" + std::to_string(index) + "]: " + e.what());
  }
  if (!std::isfinite(v)) {
    throw NumericError("grad_check: non-finite function value when probing " + name + "[" + std::to_string(index) + "]");
  }
  return v;
}

std::vector<std::size_t> coordinates(std::size_t n, const GradCheckOptions& options, std::uint64_t salt) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (options.max_coordinates_per_tensor && *options.max_coordinates_per_tensor < n) {
    std::mt19937_64 rng(options.seed ^ salt);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(*options.max_coordinates_per_tensor);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

// probe(name, index) evaluates the function at the current parameter values
// and returns whatever `difference` needs; difference(up, down) is the
// numerator of the central difference.
template <typename Probe, typename Difference>
GradCheckResult check_core(const std::function<Var(Tape&)>& scalar, std::span<Parameter* const> params,
                           const GradCheckOptions& options, Probe probe, Difference difference) {
  if (!(options.eps >= 1e-7 && options.eps <= 1e-3)) {
    throw ContractError("grad_check step size must lie in [1e-7, 1e-3]");
  }
  for (Parameter* p : params) {
    p->grad = Tensor::zeros(p->value.shape());
  }
  {
    Tape tape;
    Var loss = scalar(tape);
    tape.backward(loss);
  }
  std::vector<Tensor> analytic;
  for (Parameter* p : params) analytic.push_back(p->grad);

  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    for (std::size_t i : coordinates(p.size(), options, stable_hash(p.name) + pi)) {
      const double saved = p.value[i];
      p.value[i] = saved + options.eps;
      const auto up = probe(p.name, i);
      p.value[i] = saved - options.eps;
      const auto down = probe(p.name, i);
      p.value[i] = saved;
      const double numeric = difference(up, down) / (2.0 * options.eps);
      const double a = analytic[pi][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double err = std::abs(a - numeric) / denom;
      ++result.coordinates_checked;
      if (err > result.max_relative_error || result.coordinates_checked == 1) {
        result.max_relative_error = err;
        result.worst_tensor = p.name;
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  for (Parameter* p : params) p->zero_grad();
  return result;
}

}  // namespace

GradCheckResult grad_check_parameters(const std::function<Var(Tape&)>& fn, std::span<Parameter* const> params,
                                      const GradCheckOptions& options) {
  return check_core(
      fn, params, options, [&](const std::string& name, std::size_t i) { return evaluate(fn, name, i); },
      [](double up, double down) { return up - down; });
}

GradCheckResult grad_check_contraction(const std::function<Var(Tape&)>& fn, const Tensor& w,
                                       std::span<Parameter* const> params, const GradCheckOptions& options) {
  auto scalar = [&](Tape& tape) { return weighted_sum(fn(tape), w); };
  auto probe = [&](const std::string& name, std::size_t i) {
    Tape tape;
    Tensor y;
    try {
      y = fn(tape).value();
    } catch (const NumericError& e) {
      throw NumericError("grad_check probe at " + name + "[" + std::to_string(i) + "]: " + e.what());
    }
    if (y.shape() != w.shape()) throw DimensionError("grad_check_contraction: weight shape does not match output");
    return y;
  };
  auto difference = [&](const Tensor& up, const Tensor& down) {
    double s = 0.0;
    for (std::size_t k = 0; k < up.size(); ++k) s += w[k] * (up[k] - down[k]);
    if (!std::isfinite(s)) throw NumericError("grad_check: non-finite output difference");
    return s;
  };
  return check_core(scalar, params, options, probe, difference);
}

GradCheckResult grad_check_detailed(const std::function<Var(Tape&, const VarMap&)>& fn, const ValueMap& point,
                                    const GradCheckOptions& options) {
  std::vector<Parameter> slots;
  slots.reserve(point.size());
  for (const auto& [name, value] : point) slots.emplace_back(name, value);
  std::vector<Parameter*> ptrs;
  for (Parameter& p : slots) ptrs.push_back(&p);
  auto wrapped = [&](Tape& tape) {
    VarMap vars;
    for (Parameter& p : slots) vars.emplace(p.name, tape.param(p));
    return fn(tape, vars);
  };
  return grad_check_parameters(wrapped, ptrs, options);
}

double grad_check(const std::function<Var(Tape&, const VarMap&)>& fn, const ValueMap& point, double eps) {
  GradCheckOptions options;
  options.eps = eps;
  return grad_check_detailed(fn, point, options).max_relative_error;
}

}  // namespace sbattn
