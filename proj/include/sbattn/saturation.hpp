#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sbattn/attention.hpp"

namespace sbattn {

/// Geometry and seed of the single-conv attention block probed by the sweep.
struct SweepSetup {
  std::uint64_t seed = 7;
  std::size_t batch = 4;
  std::size_t c_in = 8;
  std::size_t c_out = 8;
  std::size_t c_hidden = 8;
  std::size_t spatial = 6;
  std::size_t kernel = 3;
  double lambda = 0.1;
};

/// Input gradient of a sum loss, split by the path it travels.
/// trunk_grad flows through the convolution with the attention held fixed,
/// branch_grad flows through the attention branch with the trunk held fixed,
/// input_grad is the full gradient (their sum).
struct SweepRow {
  double offset = 0.0;
  double trunk_grad_norm = 0.0;
  double branch_grad_norm = 0.0;
  double input_grad_norm = 0.0;
  Tensor trunk_grad;
  Tensor branch_grad;
  Tensor input_grad;
};

struct SweepReport {
  Mechanism mechanism = Mechanism::none;
  std::vector<SweepRow> rows;
  /// Input gradient of the same block with the attention removed.
  Tensor static_input_grad;
  double static_grad_norm = 0.0;
};

/// Shifts the branch's pre-gate bias by each offset and measures how the
/// input gradient of an SE (sigmoid) or SB (tanh) block responds.
SweepReport saturation_sweep(Mechanism mechanism, std::span<const double> offsets, const SweepSetup& setup = {});

/// offset,trunk_grad_norm,branch_grad_norm,input_grad_norm with a header row.
std::string to_csv(const SweepReport& report);

}  // namespace sbattn
