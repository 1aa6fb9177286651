#pragma once

#include <cstdint>

#include "sbattn/attention.hpp"
#include "sbattn/grad_check.hpp"

namespace sbattn {

struct BlockCheck {
  GradCheckResult result;
  /// |grad| of the branch's first bias, which a batch-statistics BN removes
  /// exactly; it is excluded from the finite differences. 0 without a branch.
  double removed_bias_grad = 0.0;
};

/// Gradient check of one seeded 4-channel 3x3 attention block on a 3x4x5x5
/// input, every parameter and the input included. The trial number varies
/// stride, grouping, expert count and softmax temperature.
BlockCheck block_grad_check(Mechanism mechanism, GateKind gate, int trial, const GradCheckOptions& options = {});

}  // namespace sbattn
