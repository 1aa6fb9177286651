#include "sbattn/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "sbattn/errors.hpp"

namespace sbattn {

Parameter::Parameter(std::string name_, Tensor value_, bool decay_exempt_)
    : name(std::move(name_)),
      value(std::move(value_)),
      grad(Tensor::zeros(value.shape())),
      momentum_buffer(Tensor::zeros(value.shape())),
      decay_exempt(decay_exempt_) {}

const Tensor& Var::value() const {
  if (!tape) throw ContractError("Var is not bound to a tape");
  return tape->value(*this);
}

Tensor GradientMap::at(Var v) const {
  if (const Tensor* g = find(v)) return *g;
  return Tensor::zeros(v.shape());
}

Var Tape::add_leaf(std::string_view op, Tensor value, bool requires_grad, Parameter* param) {
  if (consumed_) throw LifecycleError("cannot record on a tape that has been swept");
  Node node;
  node.op = op;
  node.scope = scope_;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  node.param = param;
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) { return add_leaf("constant", std::move(value), false, nullptr); }

Var Tape::input(Tensor value) { return add_leaf("input", std::move(value), true, nullptr); }

Var Tape::param(Parameter& p) {
  if (p.grad.shape() != p.value.shape()) p.grad = Tensor::zeros(p.value.shape());
  if (p.momentum_buffer.shape() != p.value.shape()) p.momentum_buffer = Tensor::zeros(p.value.shape());
  return add_leaf("param", p.value, true, &p);
}

void Tape::check_owned(Var v) const {
  if (v.tape != this || v.id >= nodes_.size()) throw ContractError("Var does not belong to this tape");
}

const Tensor& Tape::value(Var v) const {
  check_owned(v);
  return nodes_[v.id].value;
}

bool Tape::requires_grad(Var v) const {
  check_owned(v);
  return nodes_[v.id].requires_grad;
}

void Tape::count(std::uint64_t multiplies, std::uint64_t adds) {
  counter_.multiplies += multiplies;
  counter_.adds += adds;
}

Var Tape::push(std::string_view op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  if (consumed_) throw LifecycleError("cannot record on a tape that has been swept");
  if (!value.all_finite()) {
    std::string where = scope_.empty() ? std::string("<top>") : scope_;
    throw NumericError("non-finite value produced by " + std::string(op) + " in " + where);
  }
  Node node;
  node.op = op;
  node.scope = scope_;
  node.value = std::move(value);
  node.backward = std::move(backward);
  for (Var in : inputs) {
    check_owned(in);
    node.inputs.push_back(in.id);
    node.requires_grad = node.requires_grad || nodes_[in.id].requires_grad;
  }
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

GradientMap Tape::backward(Var loss) {
  check_owned(loss);
  if (consumed_) throw LifecycleError("backward called twice on the same tape");
  if (nodes_[loss.id].value.size() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_str(nodes_[loss.id].value.shape()));
  }
  consumed_ = true;

  std::vector<std::optional<Tensor>> grads(nodes_.size());
  grads[loss.id] = Tensor::ones(nodes_[loss.id].value.shape());

  std::vector<const Tensor*> in_values;
  std::vector<Tensor*> in_grads;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!grads[i] || !node.requires_grad || !node.backward) continue;
    in_values.clear();
    in_grads.clear();
    for (std::size_t in : node.inputs) {
      in_values.push_back(&nodes_[in].value);
      if (nodes_[in].requires_grad) {
        if (!grads[in]) grads[in] = Tensor::zeros(nodes_[in].value.shape());
        in_grads.push_back(&*grads[in]);
      } else {
        in_grads.push_back(nullptr);
      }
    }
    node.backward(BackwardArgs{*grads[i], node.value, in_values, in_grads});
  }

  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].param && grads[i]) nodes_[i].param->grad += *grads[i];
  }
  return GradientMap(std::move(grads));
}

// ---------------------------------------------------------------------------
// Elementwise and reductions

namespace {

void require_same_shape(std::string_view op, Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename F, typename D>
Var unary(std::string_view op, Var a, F f, D dfdx_from_y_x) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return a.tape->push(op, std::move(y), {a}, [dfdx_from_y_x](const BackwardArgs& args) {
    Tensor* gx = args.input_grads[0];
    if (!gx) return;
    const Tensor& x = *args.inputs[0];
    for (std::size_t i = 0; i < x.size(); ++i) {
      (*gx)[i] += args.grad_out[i] * dfdx_from_y_x(args.output[i], x[i]);
    }
  });
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  return a.tape->push("add", a.value() + b.value(), {a, b}, [](const BackwardArgs& args) {
    for (Tensor* g : args.input_grads) {
      if (g) *g += args.grad_out;
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a, b);
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  return a.tape->push("mul", std::move(y), {a, b}, [](const BackwardArgs& args) {
    const Tensor& av = *args.inputs[0];
    const Tensor& bv = *args.inputs[1];
    if (Tensor* ga = args.input_grads[0]) {
      for (std::size_t i = 0; i < av.size(); ++i) (*ga)[i] += args.grad_out[i] * bv[i];
    }
    if (Tensor* gb = args.input_grads[1]) {
      for (std::size_t i = 0; i < av.size(); ++i) (*gb)[i] += args.grad_out[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  return a.tape->push("scale", a.value() * s, {a}, [s](const BackwardArgs& args) {
    if (Tensor* g = args.input_grads[0]) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += args.grad_out[i] * s;
    }
  });
}

Var sum(Var a) {
  return a.tape->push("sum", Tensor::scalar(a.value().sum()), {a}, [](const BackwardArgs& args) {
    if (Tensor* g = args.input_grads[0]) {
      const double go = args.grad_out[0];
      for (double& v : g->data()) v += go;
    }
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var weighted_sum(Var a, const Tensor& weights) {
  if (weights.shape() != a.shape()) {
    throw DimensionError("weighted_sum: weights " + shape_str(weights.shape()) + " vs " + shape_str(a.shape()));
  }
  const Tensor& x = a.value();
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * weights[i];
  return a.tape->push("weighted_sum", Tensor::scalar(s), {a}, [weights](const BackwardArgs& args) {
    if (Tensor* g = args.input_grads[0]) {
      const double go = args.grad_out[0];
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += go * weights[i];
    }
  });
}

Var detach(Var a) { return a.tape->constant(a.value()); }

Var reshape(Var a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  return a.tape->push("reshape", std::move(y), {a}, [](const BackwardArgs& args) {
    if (Tensor* g = args.input_grads[0]) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += args.grad_out[i];
    }
  });
}

Var relu(Var a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double, double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var relu6(Var a) {
  return unary(
      "relu6", a, [](double x) { return std::clamp(x, 0.0, 6.0); },
      [](double, double x) { return (x > 0.0 && x < 6.0) ? 1.0 : 0.0; });
}

Var tanh(Var a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); }, [](double y, double) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double y, double) { return y * (1.0 - y); });
}

Var softmax(Var logits, double temperature) {
  const Tensor& x = logits.value();
  if (x.rank() != 2) throw DimensionError("softmax expects [N, C], got " + shape_str(x.shape()));
  if (!(temperature > 0.0)) throw ConfigError("softmax temperature must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1);
  Tensor y(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double mx = x.at(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      y.at(i, j) = std::exp((x.at(i, j) - mx) / temperature);
      z += y.at(i, j);
    }
    for (std::size_t j = 0; j < c; ++j) y.at(i, j) /= z;
  }
  return logits.tape->push("softmax", std::move(y), {logits}, [n, c, temperature](const BackwardArgs& args) {
    Tensor* g = args.input_grads[0];
    if (!g) return;
    const Tensor& s = args.output;
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += args.grad_out.at(i, j) * s.at(i, j);
      for (std::size_t j = 0; j < c; ++j) g->at(i, j) += s.at(i, j) * (args.grad_out.at(i, j) - dot) / temperature;
    }
  });
}

// ---------------------------------------------------------------------------
// Products

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(av.shape()) + " by " + shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av.at(i, p);
      const double* brow = bv.raw() + p * n;
      double* crow = c.raw() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  a.tape->count(m * n * k, m * n * k);
  return a.tape->push("matmul", std::move(c), {a, b}, [m, k, n](const BackwardArgs& args) {
    const Tensor& av = *args.inputs[0];
    const Tensor& bv = *args.inputs[1];
    const Tensor& go = args.grad_out;
    if (Tensor* ga = args.input_grads[0]) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += go.at(i, j) * bv.at(p, j);
          ga->at(i, p) += s;
        }
      }
    }
    if (Tensor* gb = args.input_grads[1]) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av.at(i, p);
          for (std::size_t j = 0; j < n; ++j) gb->at(p, j) += aip * go.at(i, j);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (stride == 0) throw ConfigError("convolution stride must be positive");
  if (in + 2 * padding < kernel) {
    throw DimensionError("spatial extent " + std::to_string(in) + " with padding " + std::to_string(padding) +
                         " is smaller than kernel " + std::to_string(kernel));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

namespace kernels {

ConvGeometry conv_geometry(const Shape& input, const Shape& kernel, Conv2dOptions o) {
  if (input.size() != 4) throw DimensionError("conv2d input must be NCHW, got " + shape_str(input));
  if (kernel.size() != 4) throw DimensionError("conv2d kernel must be [c_out, c_in/groups, k, k], got " + shape_str(kernel));
  if (o.groups == 0) throw ConfigError("conv2d groups must be positive");
  const std::size_t c_in = input[1], c_out = kernel[0];
  if (c_in % o.groups != 0 || c_out % o.groups != 0) {
    throw ConfigError("conv2d groups " + std::to_string(o.groups) + " must divide c_in " + std::to_string(c_in) +
                      " and c_out " + std::to_string(c_out));
  }
  if (kernel[1] != c_in / o.groups) {
    throw DimensionError("conv2d kernel " + shape_str(kernel) + " expects " + std::to_string(kernel[1] * o.groups) +
                         " input channels, input has " + std::to_string(c_in));
  }
  if (kernel[2] != kernel[3]) throw DimensionError("conv2d kernel must be square, got " + shape_str(kernel));
  const std::size_t k = kernel[2];
  ConvGeometry g{c_in, c_out, input[2], input[3], k, o.stride, o.padding, o.groups, 0, 0};
  g.out_h = conv_out_extent(g.h, k, o.stride, o.padding);
  g.out_w = conv_out_extent(g.w, k, o.stride, o.padding);
  return g;
}

namespace {

struct Range {
  std::ptrdiff_t lo, hi;
};

// Output positions o with 0 <= o*stride + offset < in.
Range valid_range(std::ptrdiff_t offset, std::ptrdiff_t stride, std::ptrdiff_t in, std::ptrdiff_t out) {
  std::ptrdiff_t lo = 0;
  if (offset < 0) lo = (-offset + stride - 1) / stride;
  std::ptrdiff_t hi = 0;
  if (in - 1 - offset >= 0) hi = std::min<std::ptrdiff_t>(out, (in - 1 - offset) / stride + 1);
  return {lo, std::max(lo, hi)};
}

// Calls fn(kernel_value_index, in_offset, out_offset, count, in_stride) for each contiguous run.
template <typename Fn>
void for_each_tap(const ConvGeometry& g, Fn&& fn) {
  const auto s = static_cast<std::ptrdiff_t>(g.stride);
  const auto p = static_cast<std::ptrdiff_t>(g.padding);
  const auto H = static_cast<std::ptrdiff_t>(g.h), W = static_cast<std::ptrdiff_t>(g.w);
  const auto OH = static_cast<std::ptrdiff_t>(g.out_h), OW = static_cast<std::ptrdiff_t>(g.out_w);
  const auto K = static_cast<std::ptrdiff_t>(g.k);
  for (std::ptrdiff_t kh = 0; kh < K; ++kh) {
    const Range rh = valid_range(kh - p, s, H, OH);
    for (std::ptrdiff_t kw = 0; kw < K; ++kw) {
      const Range rw = valid_range(kw - p, s, W, OW);
      if (rw.lo >= rw.hi) continue;
      for (std::ptrdiff_t oh = rh.lo; oh < rh.hi; ++oh) {
        const std::ptrdiff_t ih = oh * s + kh - p;
        fn(static_cast<std::size_t>(kh * K + kw), ih * W + rw.lo * s + kw - p, oh * OW + rw.lo, rw.hi - rw.lo, s);
      }
    }
  }
}

bool pointwise(const ConvGeometry& g) { return g.k == 1 && g.stride == 1 && g.padding == 0; }

// 1x1 stride-1 convolution is a per-group matrix product over whole planes.
// Channels are consumed four at a time so each output row is loaded once per block.
void pointwise_forward(const ConvGeometry& g, const double* in, const double* kernel, double* out) {
  const std::size_t cpi = g.c_in_per_group(), cpo = g.c_out_per_group(), plane = g.h * g.w;
  for (std::size_t grp = 0; grp < g.groups; ++grp) {
    for (std::size_t oc = 0; oc < cpo; ++oc) {
      const std::size_t co = grp * cpo + oc;
      double* o = out + co * plane;
      const double* w = kernel + co * cpi;
      const double* x = in + grp * cpi * plane;
      std::size_t ic = 0;
      for (; ic + 4 <= cpi; ic += 4) {
        const double w0 = w[ic], w1 = w[ic + 1], w2 = w[ic + 2], w3 = w[ic + 3];
        const double* x0 = x + ic * plane;
        const double* x1 = x0 + plane;
        const double* x2 = x1 + plane;
        const double* x3 = x2 + plane;
        for (std::size_t j = 0; j < plane; ++j) o[j] += w0 * x0[j] + w1 * x1[j] + w2 * x2[j] + w3 * x3[j];
      }
      for (; ic < cpi; ++ic) {
        const double wv = w[ic];
        const double* x0 = x + ic * plane;
        for (std::size_t j = 0; j < plane; ++j) o[j] += wv * x0[j];
      }
    }
  }
}

void pointwise_backward(const ConvGeometry& g, const double* in, const double* kernel, const double* grad_out,
                        double* grad_in, double* grad_kernel) {
  const std::size_t cpi = g.c_in_per_group(), cpo = g.c_out_per_group(), plane = g.h * g.w;
  for (std::size_t grp = 0; grp < g.groups; ++grp) {
    const double* go = grad_out + grp * cpo * plane;
    if (grad_in) {
      for (std::size_t ic = 0; ic < cpi; ++ic) {
        const std::size_t ci = grp * cpi + ic;
        double* gx = grad_in + ci * plane;
        std::size_t oc = 0;
        for (; oc + 4 <= cpo; oc += 4) {
          const std::size_t co = grp * cpo + oc;
          const double w0 = kernel[co * cpi + ic], w1 = kernel[(co + 1) * cpi + ic];
          const double w2 = kernel[(co + 2) * cpi + ic], w3 = kernel[(co + 3) * cpi + ic];
          const double* g0 = go + oc * plane;
          const double* g1 = g0 + plane;
          const double* g2 = g1 + plane;
          const double* g3 = g2 + plane;
          for (std::size_t j = 0; j < plane; ++j) gx[j] += w0 * g0[j] + w1 * g1[j] + w2 * g2[j] + w3 * g3[j];
        }
        for (; oc < cpo; ++oc) {
          const double wv = kernel[(grp * cpo + oc) * cpi + ic];
          const double* g0 = go + oc * plane;
          for (std::size_t j = 0; j < plane; ++j) gx[j] += wv * g0[j];
        }
      }
    }
    if (grad_kernel) {
      const double* x = in + grp * cpi * plane;
      for (std::size_t oc = 0; oc < cpo; ++oc) {
        const double* g0 = go + oc * plane;
        double* gk = grad_kernel + (grp * cpo + oc) * cpi;
        std::size_t ic = 0;
        for (; ic + 4 <= cpi; ic += 4) {
          const double* x0 = x + ic * plane;
          const double* x1 = x0 + plane;
          const double* x2 = x1 + plane;
          const double* x3 = x2 + plane;
          double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
          for (std::size_t j = 0; j < plane; ++j) {
            a0 += g0[j] * x0[j];
            a1 += g0[j] * x1[j];
            a2 += g0[j] * x2[j];
            a3 += g0[j] * x3[j];
          }
          gk[ic] += a0;
          gk[ic + 1] += a1;
          gk[ic + 2] += a2;
          gk[ic + 3] += a3;
        }
        for (; ic < cpi; ++ic) {
          const double* x0 = x + ic * plane;
          double a = 0.0;
          for (std::size_t j = 0; j < plane; ++j) a += g0[j] * x0[j];
          gk[ic] += a;
        }
      }
    }
  }
}

}  // namespace

void conv_forward_sample(const ConvGeometry& g, const double* in, const double* kernel, double* out) {
  if (pointwise(g)) return pointwise_forward(g, in, kernel, out);
  const std::size_t cpi = g.c_in_per_group(), cpo = g.c_out_per_group();
  const std::size_t in_plane = g.h * g.w, out_plane = g.out_h * g.out_w, kk = g.k * g.k;
  for (std::size_t grp = 0; grp < g.groups; ++grp) {
    for (std::size_t oc = 0; oc < cpo; ++oc) {
      const std::size_t co = grp * cpo + oc;
      double* o = out + co * out_plane;
      for (std::size_t ic = 0; ic < cpi; ++ic) {
        const double* x = in + (grp * cpi + ic) * in_plane;
        const double* wk = kernel + (co * cpi + ic) * kk;
        for_each_tap(g, [&](std::size_t tap, std::ptrdiff_t xi, std::ptrdiff_t oi, std::ptrdiff_t n, std::ptrdiff_t s) {
          const double wv = wk[tap];
          double* orow = o + oi;
          const double* xrow = x + xi;
          if (s == 1) {
            for (std::ptrdiff_t j = 0; j < n; ++j) orow[j] += wv * xrow[j];
          } else {
            for (std::ptrdiff_t j = 0; j < n; ++j) orow[j] += wv * xrow[j * s];
          }
        });
      }
    }
  }
}

void conv_backward_sample(const ConvGeometry& g, const double* in, const double* kernel, const double* grad_out,
                          double* grad_in, double* grad_kernel) {
  if (pointwise(g)) return pointwise_backward(g, in, kernel, grad_out, grad_in, grad_kernel);
  const std::size_t cpi = g.c_in_per_group(), cpo = g.c_out_per_group();
  const std::size_t in_plane = g.h * g.w, out_plane = g.out_h * g.out_w, kk = g.k * g.k;
  for (std::size_t grp = 0; grp < g.groups; ++grp) {
    for (std::size_t oc = 0; oc < cpo; ++oc) {
      const std::size_t co = grp * cpo + oc;
      const double* go = grad_out + co * out_plane;
      for (std::size_t ic = 0; ic < cpi; ++ic) {
        const std::size_t ci = grp * cpi + ic;
        const double* x = in + ci * in_plane;
        double* gx = grad_in ? grad_in + ci * in_plane : nullptr;
        const double* wk = kernel + (co * cpi + ic) * kk;
        double* gk = grad_kernel ? grad_kernel + (co * cpi + ic) * kk : nullptr;
        for_each_tap(g, [&](std::size_t tap, std::ptrdiff_t xi, std::ptrdiff_t oi, std::ptrdiff_t n, std::ptrdiff_t s) {
          const double* grow = go + oi;
          if (gx) {
            const double wv = wk[tap];
            double* gxrow = gx + xi;
            for (std::ptrdiff_t j = 0; j < n; ++j) gxrow[j * s] += wv * grow[j];
          }
          if (gk) {
            const double* xrow = x + xi;
            double acc = 0.0;
            for (std::ptrdiff_t j = 0; j < n; ++j) acc += grow[j] * xrow[j * s];
            gk[tap] += acc;
          }
        });
      }
    }
  }
}

}  // namespace kernels

Var conv2d(Var input, Var kernel, Conv2dOptions options) {
  const Tensor& x = input.value();
  const Tensor& w = kernel.value();
  const kernels::ConvGeometry g = kernels::conv_geometry(x.shape(), w.shape(), options);
  const std::size_t n = x.dim(0);
  Tensor y({n, g.c_out, g.out_h, g.out_w});
  const std::size_t in_stride = g.c_in * g.h * g.w, out_stride = g.c_out * g.out_h * g.out_w;
  for (std::size_t i = 0; i < n; ++i) {
    kernels::conv_forward_sample(g, x.raw() + i * in_stride, w.raw(), y.raw() + i * out_stride);
  }
  const std::uint64_t ops = g.multiplies_per_sample() * n;
  input.tape->count(ops, ops);
  return input.tape->push("conv2d", std::move(y), {input, kernel}, [g, n, in_stride, out_stride](const BackwardArgs& args) {
    const Tensor& x = *args.inputs[0];
    const Tensor& w = *args.inputs[1];
    Tensor* gx = args.input_grads[0];
    Tensor* gw = args.input_grads[1];
    for (std::size_t i = 0; i < n; ++i) {
      kernels::conv_backward_sample(g, x.raw() + i * in_stride, w.raw(), args.grad_out.raw() + i * out_stride,
                                    gx ? gx->raw() + i * in_stride : nullptr, gw ? gw->raw() : nullptr);
    }
  });
}

}  // namespace sbattn
