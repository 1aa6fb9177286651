#pragma once

// Closed-form parameter and multiply/add accounting.
//
// Conventions (shared with the Tape op counter so the two can be compared):
//   conv      multiplies = adds = c_out * H' * W' * (c_in / groups) * k^2
//   FC        multiplies = adds = c_in * c_out  (bias adds folded in)
//   GAP       multiplies = C, adds = C * H * W
//   SB combine  multiplies = C, adds = C * H * W
//   SE combine  multiplies = C * H * W, adds = 0
// Batch norm and activations are not counted (fusable / negligible).
// MAdds is reported as the multiply count at batch size 1.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "sbattn/attention.hpp"
#include "sbattn/model.hpp"

namespace sbattn {

struct LayerCost {
  std::string name;
  std::string type;
  std::uint64_t params = 0;
  std::uint64_t multiplies = 0;
  std::uint64_t adds = 0;
};

struct CostReport {
  std::uint64_t params = 0;
  std::uint64_t multiplies = 0;
  std::uint64_t adds = 0;
  std::uint64_t madds = 0;
  std::vector<LayerCost> breakdown;

  /// Appends an entry and updates the totals.
  void add(LayerCost entry);
};

struct OpCost {
  std::uint64_t multiplies = 0;
  std::uint64_t adds = 0;

  friend bool operator==(const OpCost&, const OpCost&) = default;
};

/// Extra cost of an SE or SB attention around a layer with c_in x h x w input
/// and c_out x h x w output.
OpCost attention_overhead(std::size_t c_in, std::size_t c_out, std::size_t c_hid, std::size_t h, std::size_t w,
                          Mechanism mechanism);

/// Same, allowing different input and output spatial sizes (strided convs).
OpCost attention_overhead_strided(std::size_t c_in, std::size_t c_out, std::size_t c_hid, std::size_t in_hw,
                                  std::size_t out_hw, Mechanism mechanism);

std::uint64_t count_params(const Model& model);

/// Per-layer costs for one sample of the given NCHW (or CHW) input shape.
CostReport count_madds(const Model& model, const Shape& input_shape);

nlohmann::json to_json(const CostReport& report);
/// name,type,params,multiplies,adds with a header row.
std::string to_csv(const CostReport& report);

}  // namespace sbattn
