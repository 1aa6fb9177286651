#include "sbattn/saturation.hpp"

#include <cstdio>

#include "sbattn/errors.hpp"

namespace sbattn {

namespace {

enum class Path { full, trunk_only, branch_only };

Tensor input_gradient(AttentiveConv& block, const Tensor& x, Path path) {
  Tape tape;
  Var xin = tape.input(x);
  Var t = conv2d(xin, tape.param(block.weight), block.options);
  Var y = t;
  if (block.branch) {
    Var a = attention_branch_forward(tape, xin, *block.branch);
    if (path == Path::trunk_only) a = detach(a);
    if (path == Path::branch_only) t = detach(t);
    y = block.mechanism == Mechanism::se ? se_combine(t, a) : sb_combine(tape, t, a, *block.sb);
  } else if (path == Path::branch_only) {
    return Tensor::zeros(x.shape());
  }
  GradientMap grads = tape.backward(sum(y));
  block.weight.zero_grad();
  std::vector<Parameter*> params;
  block.collect(params);
  for (Parameter* p : params) p->zero_grad();
  return grads.at(xin);
}

}  // namespace

SweepReport saturation_sweep(Mechanism mechanism, std::span<const double> offsets, const SweepSetup& setup) {
  if (mechanism != Mechanism::se && mechanism != Mechanism::sb) {
    throw ConfigError("saturation sweep supports the se and sb mechanisms, got " + std::string(to_string(mechanism)));
  }
  std::mt19937_64 rng(setup.seed);
  const Tensor x = random_normal({setup.batch, setup.c_in, setup.spatial, setup.spatial}, rng);

  AttentionSettings settings;
  settings.mechanism = mechanism;
  settings.gate = default_gate(mechanism);
  settings.c_hidden = setup.c_hidden;
  settings.lambda_init = setup.lambda;
  const Conv2dOptions conv{1, setup.kernel / 2, 1};

  std::mt19937_64 block_rng(setup.seed + 1);
  const AttentiveConv prototype =
      AttentiveConv::make("sweep", setup.c_in, setup.c_out, setup.kernel, conv, settings, block_rng);

  SweepReport report;
  report.mechanism = mechanism;
  {
    AttentiveConv plain = prototype;
    plain.mechanism = Mechanism::none;
    plain.branch.reset();
    plain.sb.reset();
    report.static_input_grad = input_gradient(plain, x, Path::full);
    report.static_grad_norm = report.static_input_grad.norm();
  }

  for (double offset : offsets) {
    AttentiveConv block = prototype;
    for (double& b : block.branch->fc2.bias.value.data()) b += offset;
    SweepRow row;
    row.offset = offset;
    row.trunk_grad = input_gradient(block, x, Path::trunk_only);
    row.branch_grad = input_gradient(block, x, Path::branch_only);
    row.input_grad = input_gradient(block, x, Path::full);
    row.trunk_grad_norm = row.trunk_grad.norm();
    row.branch_grad_norm = row.branch_grad.norm();
    row.input_grad_norm = row.input_grad.norm();
    report.rows.push_back(std::move(row));
  }
  return report;
}

std::string to_csv(const SweepReport& report) {
  std::string out = "offset,trunk_grad_norm,branch_grad_norm,input_grad_norm\n";
  char line[160];
  for (const SweepRow& r : report.rows) {
    std::snprintf(line, sizeof line, "%.17g,%.17g,%.17g,%.17g\n", r.offset, r.trunk_grad_norm, r.branch_grad_norm,
                  r.input_grad_norm);
    out += line;
  }
  return out;
}

}  // namespace sbattn
