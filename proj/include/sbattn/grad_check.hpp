#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>

#include "sbattn/autodiff.hpp"

namespace sbattn {

using ValueMap = std::map<std::string, Tensor>;
using VarMap = std::map<std::string, Var>;

struct GradCheckOptions {
  double eps = 1e-5;
  /// Probe at most this many coordinates per tensor (seeded sample); all when unset.
  std::optional<std::size_t> max_coordinates_per_tensor;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates_checked = 0;
};

/// Compares reverse-mode gradients of a scalar function with central
/// differences. The relative error of a coordinate is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
GradCheckResult grad_check_detailed(const std::function<Var(Tape&, const VarMap&)>& fn, const ValueMap& point,
                                    const GradCheckOptions& options = {});

double grad_check(const std::function<Var(Tape&, const VarMap&)>& fn, const ValueMap& point, double eps);

/// Variant for functions that read Parameters directly (layers, blocks,
/// models). Each listed parameter's value is perturbed in place and restored.
GradCheckResult grad_check_parameters(const std::function<Var(Tape&)>& fn, std::span<Parameter* const> params,
                                      const GradCheckOptions& options = {});

/// Checks the vector-Jacobian product <w, d out / d param> of a tensor-valued
/// function. The finite difference is taken per output element before the
/// contraction, so outputs a probe does not reach cancel exactly instead of
/// leaving roundoff from a large scalar sum.
GradCheckResult grad_check_contraction(const std::function<Var(Tape&)>& fn, const Tensor& w,
                                       std::span<Parameter* const> params, const GradCheckOptions& options = {});

}  // namespace sbattn
