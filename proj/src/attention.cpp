#include "sbattn/attention.hpp"

#include <cmath>

#include "sbattn/errors.hpp"

namespace sbattn {

std::string_view to_string(GateKind gate) {
  switch (gate) {
    case GateKind::tanh: return "tanh";
    case GateKind::sigmoid: return "sigmoid";
    case GateKind::softmax: return "softmax";
    case GateKind::relu: return "relu";
    case GateKind::none: return "none";
  }
  return "?";
}

std::string_view to_string(Mechanism mechanism) {
  switch (mechanism) {
    case Mechanism::none: return "static";
    case Mechanism::se: return "se";
    case Mechanism::sb: return "sb";
    case Mechanism::dyconv: return "dyconv";
  }
  return "?";
}

GateKind parse_gate(std::string_view text) {
  if (text == "tanh") return GateKind::tanh;
  if (text == "sigmoid") return GateKind::sigmoid;
  if (text == "softmax") return GateKind::softmax;
  if (text == "relu") return GateKind::relu;
  if (text == "none") return GateKind::none;
  throw ConfigError("unknown gate '" + std::string(text) + "'");
}

Mechanism parse_mechanism(std::string_view text) {
  if (text == "static" || text == "none") return Mechanism::none;
  if (text == "se") return Mechanism::se;
  if (text == "sb") return Mechanism::sb;
  if (text == "dyconv") return Mechanism::dyconv;
  throw ConfigError("unknown attention mechanism '" + std::string(text) + "'");
}

GateKind default_gate(Mechanism mechanism) {
  switch (mechanism) {
    case Mechanism::se: return GateKind::sigmoid;
    case Mechanism::dyconv: return GateKind::softmax;
    default: return GateKind::tanh;
  }
}

// ---------------------------------------------------------------------------
// Branch

AttentionBranch AttentionBranch::make(const std::string& name, std::size_t c_in, std::size_t c_hidden,
                                      std::size_t c_out, GateKind gate, std::mt19937_64& rng) {
  if (c_in == 0 || c_hidden == 0 || c_out == 0) throw ConfigError("attention branch widths must be positive");
  AttentionBranch b;
  b.fc1 = Linear::make(name + ".fc1", c_in, c_hidden, rng);
  b.bn = BatchNormState::make(name + ".bn", c_hidden);
  b.fc2 = Linear::make(name + ".fc2", c_hidden, c_out, rng);
  b.gate = gate;
  b.hidden_dropout.config.rng_seed = stable_hash(name + ".dropout");
  return b;
}

std::size_t AttentionBranch::parameter_count() const {
  return fc1.weight.size() + fc1.bias.size() + bn.gamma.size() + bn.beta.size() + fc2.weight.size() + fc2.bias.size();
}

void AttentionBranch::set_mode(Mode mode) {
  bn.mode = mode;
  hidden_dropout.mode = mode;
}

void AttentionBranch::collect(std::vector<Parameter*>& out) {
  for (Parameter* p : {&fc1.weight, &fc1.bias, &bn.gamma, &bn.beta, &fc2.weight, &fc2.bias}) out.push_back(p);
}

Var attention_branch_logits(Tape& tape, Var x, AttentionBranch& branch) {
  if (x.value().rank() != 4 || x.value().dim(1) != branch.c_in()) {
    throw DimensionError("attention branch expects " + std::to_string(branch.c_in()) + " input channels, got " +
                         shape_str(x.value().shape()));
  }
  Var h = fully_connected(tape, global_avg_pool(x), branch.fc1);
  if (branch.bn_after_relu) {
    h = batch_norm(tape, relu(h), branch.bn);
  } else {
    h = relu(batch_norm(tape, h, branch.bn));
  }
  h = branch.hidden_dropout(h);
  return fully_connected(tape, h, branch.fc2);
}

Var apply_gate(Var z, GateKind gate, double temperature) {
  switch (gate) {
    case GateKind::tanh: return tanh(z);
    case GateKind::sigmoid: return sigmoid(z);
    case GateKind::softmax: return softmax(z, temperature);
    case GateKind::relu: return relu(z);
    case GateKind::none: return z;
  }
  throw ConfigError("unknown gate");
}

Var attention_branch_forward(Tape& tape, Var x, AttentionBranch& branch) {
  return apply_gate(attention_branch_logits(tape, x, branch), branch.gate, branch.temperature);
}

// ---------------------------------------------------------------------------
// Combines

SBParams SBParams::make(const std::string& name, std::size_t channels, double init_value) {
  SBParams p;
  p.lambda = Parameter(name + ".lambda", Tensor({channels}, init_value), true);
  p.init_value = init_value;
  return p;
}

namespace {

struct CombineDims {
  std::size_t n, c, hw;
};

CombineDims combine_dims(std::string_view op, const Tensor& t, const Tensor& a) {
  if (t.rank() != 4) throw DimensionError(std::string(op) + ": trunk must be NCHW, got " + shape_str(t.shape()));
  if (a.rank() != 2 || a.dim(0) != t.dim(0) || a.dim(1) != t.dim(1)) {
    throw DimensionError(std::string(op) + ": attention " + shape_str(a.shape()) + " does not match trunk " +
                         shape_str(t.shape()));
  }
  return {t.dim(0), t.dim(1), t.dim(2) * t.dim(3)};
}

}  // namespace

Var se_combine(Var t, Var a) {
  const Tensor& tv = t.value();
  const Tensor& av = a.value();
  const CombineDims d = combine_dims("se_combine", tv, av);
  Tensor y = tv;
  for (std::size_t i = 0; i < d.n; ++i)
    for (std::size_t c = 0; c < d.c; ++c) {
      const double s = av.at(i, c);
      double* p = y.raw() + (i * d.c + c) * d.hw;
      for (std::size_t k = 0; k < d.hw; ++k) p[k] *= s;
    }
  t.tape->count(d.n * d.c * d.hw, 0);
  return t.tape->push("se_combine", std::move(y), {t, a}, [d](const BackwardArgs& args) {
    const Tensor& tv = *args.inputs[0];
    const Tensor& av = *args.inputs[1];
    Tensor* gt = args.input_grads[0];
    Tensor* ga = args.input_grads[1];
    for (std::size_t i = 0; i < d.n; ++i)
      for (std::size_t c = 0; c < d.c; ++c) {
        const std::size_t base = (i * d.c + c) * d.hw;
        const double s = av.at(i, c);
        double acc = 0.0;
        for (std::size_t k = 0; k < d.hw; ++k) {
          const double g = args.grad_out[base + k];
          if (gt) (*gt)[base + k] += g * s;
          acc += g * tv[base + k];
        }
        if (ga) ga->at(i, c) += acc;
      }
  });
}

Var sb_combine(Var t, Var a, Var lambda) {
  const Tensor& tv = t.value();
  const Tensor& av = a.value();
  const Tensor& lv = lambda.value();
  const CombineDims d = combine_dims("sb_combine", tv, av);
  if (lv.shape() != Shape{d.c}) {
    throw DimensionError("sb_combine: lambda " + shape_str(lv.shape()) + " for " + std::to_string(d.c) + " channels");
  }
  Tensor y = tv;
  for (std::size_t i = 0; i < d.n; ++i)
    for (std::size_t c = 0; c < d.c; ++c) {
      const double shift = lv[c] * av.at(i, c);
      double* p = y.raw() + (i * d.c + c) * d.hw;
      for (std::size_t k = 0; k < d.hw; ++k) p[k] += shift;
    }
  t.tape->count(d.n * d.c, d.n * d.c * d.hw);
  return t.tape->push("sb_combine", std::move(y), {t, a, lambda}, [d](const BackwardArgs& args) {
    const Tensor& av = *args.inputs[1];
    const Tensor& lv = *args.inputs[2];
    Tensor* gt = args.input_grads[0];
    Tensor* ga = args.input_grads[1];
    Tensor* gl = args.input_grads[2];
    if (gt) *gt += args.grad_out;
    for (std::size_t i = 0; i < d.n; ++i)
      for (std::size_t c = 0; c < d.c; ++c) {
        const double* g = args.grad_out.raw() + (i * d.c + c) * d.hw;
        double acc = 0.0;
        for (std::size_t k = 0; k < d.hw; ++k) acc += g[k];
        if (ga) ga->at(i, c) += lv[c] * acc;
        if (gl) (*gl)[c] += av.at(i, c) * acc;
      }
  });
}

Var sb_combine(Tape& tape, Var t, Var a, SBParams& sb) { return sb_combine(t, a, tape.param(sb.lambda)); }

// ---------------------------------------------------------------------------
// Dynamic convolution

Tensor trunk_kernel_init(std::size_t c_out, std::size_t c_in_per_group, std::size_t k, std::mt19937_64& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(c_out * k * k));
  return random_normal({c_out, c_in_per_group, k, k}, rng, 0.0, stddev);
}

DyConvExperts DyConvExperts::make(const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t kernel,
                                  std::size_t groups, std::size_t n, double temperature, std::size_t c_hidden,
                                  std::mt19937_64& rng, GateKind gate) {
  if (n < 1) throw ConfigError("dynamic convolution needs at least one expert");
  if (groups == 0 || c_in % groups != 0 || c_out % groups != 0) {
    throw ConfigError("dynamic convolution groups must divide both channel counts");
  }
  DyConvExperts d;
  d.temperature = temperature;
  for (std::size_t j = 0; j < n; ++j) {
    d.experts.emplace_back(name + ".expert" + std::to_string(j), trunk_kernel_init(c_out, c_in / groups, kernel, rng));
  }
  d.branch = AttentionBranch::make(name + ".branch", c_in, c_hidden, n, gate, rng);
  d.branch.temperature = temperature;
  return d;
}

void DyConvExperts::collect(std::vector<Parameter*>& out) {
  for (Parameter& p : experts) out.push_back(&p);
  branch.collect(out);
}

Var dyconv_attention(Tape& tape, Var x, DyConvExperts& d) {
  return apply_gate(attention_branch_logits(tape, x, d.branch), d.branch.gate, d.temperature);
}

Var dyconv(Var x, Var pi, const std::vector<Var>& experts, Conv2dOptions options) {
  if (experts.empty()) throw ConfigError("dynamic convolution needs at least one expert");
  const Tensor& xv = x.value();
  const Tensor& pv = pi.value();
  const Shape& kshape = experts.front().shape();
  for (const Var& e : experts) {
    if (e.shape() != kshape) throw DimensionError("dynamic convolution experts must share one shape");
  }
  const kernels::ConvGeometry g = kernels::conv_geometry(xv.shape(), kshape, options);
  const std::size_t n = xv.dim(0), m = experts.size(), kp = shape_size(kshape);
  if (pv.rank() != 2 || pv.dim(0) != n || pv.dim(1) != m) {
    throw DimensionError("dynamic convolution weights " + shape_str(pv.shape()) + " for batch " + std::to_string(n) +
                         " and " + std::to_string(m) + " experts");
  }
  std::vector<const Tensor*> kernels_v;
  for (const Var& e : experts) kernels_v.push_back(&e.value());

  const std::size_t in_stride = g.c_in * g.h * g.w, out_stride = g.c_out * g.out_h * g.out_w;
  Tensor y({n, g.c_out, g.out_h, g.out_w});
  std::vector<double> mixed(kp);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(mixed.begin(), mixed.end(), 0.0);
    for (std::size_t j = 0; j < m; ++j) {
      const double w = pv.at(i, j);
      const double* e = kernels_v[j]->raw();
      for (std::size_t q = 0; q < kp; ++q) mixed[q] += w * e[q];
    }
    kernels::conv_forward_sample(g, xv.raw() + i * in_stride, mixed.data(), y.raw() + i * out_stride);
  }
  const std::uint64_t conv_ops = g.multiplies_per_sample() * n;
  x.tape->count(conv_ops + n * m * kp, conv_ops + n * (m - 1) * kp);

  std::vector<Var> inputs{x, pi};
  inputs.insert(inputs.end(), experts.begin(), experts.end());
  return x.tape->push("dyconv", std::move(y), std::move(inputs), [g, n, m, kp, in_stride, out_stride](const BackwardArgs& args) {
    const Tensor& xv = *args.inputs[0];
    const Tensor& pv = *args.inputs[1];
    Tensor* gx = args.input_grads[0];
    Tensor* gpi = args.input_grads[1];
    std::vector<double> mixed(kp), gk(kp);
    for (std::size_t i = 0; i < n; ++i) {
      std::fill(mixed.begin(), mixed.end(), 0.0);
      std::fill(gk.begin(), gk.end(), 0.0);
      for (std::size_t j = 0; j < m; ++j) {
        const double w = pv.at(i, j);
        const double* e = args.inputs[2 + j]->raw();
        for (std::size_t q = 0; q < kp; ++q) mixed[q] += w * e[q];
      }
      kernels::conv_backward_sample(g, xv.raw() + i * in_stride, mixed.data(), args.grad_out.raw() + i * out_stride,
                                    gx ? gx->raw() + i * in_stride : nullptr, gk.data());
      for (std::size_t j = 0; j < m; ++j) {
        const double* e = args.inputs[2 + j]->raw();
        if (gpi) {
          double dot = 0.0;
          for (std::size_t q = 0; q < kp; ++q) dot += gk[q] * e[q];
          gpi->at(i, j) += dot;
        }
        if (Tensor* ge = args.input_grads[2 + j]) {
          const double w = pv.at(i, j);
          for (std::size_t q = 0; q < kp; ++q) (*ge)[q] += w * gk[q];
        }
      }
    }
  });
}

Var dyconv_forward(Tape& tape, Var x, DyConvExperts& d, Conv2dOptions options) {
  Var pi = dyconv_attention(tape, x, d);
  std::vector<Var> experts;
  for (Parameter& p : d.experts) experts.push_back(tape.param(p));
  return dyconv(x, pi, experts, options);
}

// ---------------------------------------------------------------------------
// Attentive convolution

AttentiveConv AttentiveConv::make(const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t kernel,
                                  Conv2dOptions options, const AttentionSettings& s, std::mt19937_64& rng) {
  if (options.groups == 0 || c_in % options.groups != 0 || c_out % options.groups != 0) {
    throw ConfigError(name + ": groups must divide both channel counts");
  }
  AttentiveConv conv;
  conv.name = name;
  conv.c_in = c_in;
  conv.c_out = c_out;
  conv.kernel = kernel;
  conv.options = options;
  conv.mechanism = s.mechanism;
  switch (s.mechanism) {
    case Mechanism::none:
      conv.weight = Parameter(name + ".weight", trunk_kernel_init(c_out, c_in / options.groups, kernel, rng));
      break;
    case Mechanism::se:
    case Mechanism::sb:
      conv.weight = Parameter(name + ".weight", trunk_kernel_init(c_out, c_in / options.groups, kernel, rng));
      conv.branch = AttentionBranch::make(name + ".attention", c_in, s.c_hidden, c_out, s.gate, rng);
      conv.branch->bn_after_relu = s.bn_after_relu;
      conv.branch->hidden_dropout.config.rate = s.branch_dropout;
      if (s.mechanism == Mechanism::sb) conv.sb = SBParams::make(name + ".attention", c_out, s.lambda_init);
      break;
    case Mechanism::dyconv:
      conv.dynamic = DyConvExperts::make(name, c_in, c_out, kernel, options.groups, s.experts, s.temperature,
                                         s.c_hidden, rng, s.gate);
      conv.dynamic->branch.bn_after_relu = s.bn_after_relu;
      conv.dynamic->branch.hidden_dropout.config.rate = s.branch_dropout;
      break;
  }
  return conv;
}

Var AttentiveConv::forward(Tape& tape, Var x) {
  if (mechanism == Mechanism::dyconv) return dyconv_forward(tape, x, *dynamic, options);
  Var t = conv2d(x, tape.param(weight), options);
  if (mechanism == Mechanism::none) return t;
  ScopeGuard scope(tape, tape.scope() + ".attention");
  Var a = attention_branch_forward(tape, x, *branch);
  if (mechanism == Mechanism::se) return se_combine(t, a);
  return sb_combine(tape, t, a, *sb);
}

std::size_t AttentiveConv::kernel_parameter_count() const {
  if (dynamic) {
    std::size_t total = 0;
    for (const Parameter& p : dynamic->experts) total += p.size();
    return total;
  }
  return weight.size();
}

std::size_t AttentiveConv::attention_parameter_count() const {
  std::size_t total = 0;
  if (branch) total += branch->parameter_count();
  if (sb) total += sb->lambda.size();
  if (dynamic) total += dynamic->branch.parameter_count();
  return total;
}

void AttentiveConv::set_mode(Mode mode) {
  if (branch) branch->set_mode(mode);
  if (dynamic) dynamic->set_mode(mode);
}

void AttentiveConv::collect(std::vector<Parameter*>& out) {
  if (dynamic) {
    dynamic->collect(out);
    return;
  }
  out.push_back(&weight);
  if (branch) branch->collect(out);
  if (sb) out.push_back(&sb->lambda);
}

}  // namespace sbattn
