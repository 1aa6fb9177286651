#include "sbattn/diagnostics.hpp"

#include <vector>

namespace sbattn {

BlockCheck block_grad_check(Mechanism mechanism, GateKind gate, int trial, const GradCheckOptions& options) {
  std::mt19937_64 rng(3100 + static_cast<std::uint64_t>(trial));
  const std::size_t c = 4;
  AttentionSettings s;
  s.mechanism = mechanism;
  s.gate = gate;
  s.c_hidden = mechanism == Mechanism::dyconv ? 2 : 3;
  s.experts = 2 + static_cast<std::size_t>(trial % 3);
  s.temperature = trial % 4 == 0 ? 1.0 : 30.0;
  const Conv2dOptions conv{1 + static_cast<std::size_t>(trial % 3 == 2), 1, trial % 2 ? c : 1};
  AttentiveConv block = AttentiveConv::make("block", c, c, 3, conv, s, rng);
  if (block.sb) block.sb->lambda.value = random_normal({c}, rng, 0.0, 0.5);
  Parameter x("x", random_normal({3, c, 5, 5}, rng));

  std::vector<Parameter*> all{&x};
  block.collect(all);
  AttentionBranch* branch = block.dynamic ? &block.dynamic->branch : block.branch ? &*block.branch : nullptr;
  std::vector<Parameter*> params;
  for (Parameter* p : all) {
    if (!branch || p != &branch->fc1.bias) params.push_back(p);
  }
  auto out = [&](Tape& tape) { return block.forward(tape, tape.param(x)); };
  std::mt19937_64 weight_rng(3200 + static_cast<std::uint64_t>(trial));
  const Tensor w = [&] {
    Tape probe;
    return random_normal(out(probe).shape(), weight_rng);
  }();

  BlockCheck check;
  if (branch) {
    for (Parameter* p : all) p->zero_grad();
    Tape tape;
    tape.backward(weighted_sum(out(tape), w));
    check.removed_bias_grad = branch->fc1.bias.grad.max_abs();
  }
  check.result = grad_check_contraction(out, w, params, options);
  return check;
}

}  // namespace sbattn
