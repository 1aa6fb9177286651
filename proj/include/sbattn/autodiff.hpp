#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// A Tape records every operation of one forward pass in execution order.
// Each node stores its output value and a backward rule; Tape::backward
// sweeps the nodes in reverse and accumulates gradients, summing the
// contributions of multiple consumers in node-index order. Parameters bound
// to the tape receive their gradient in Parameter::grad.
//
// The tape also tallies multiplies and adds for the cost-bearing operations
// (convolution, matrix products, pooling and attention combines). Elementwise
// activations and normalization are not counted.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sbattn/tensor.hpp"

namespace sbattn {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor momentum_buffer;
  bool decay_exempt = false;

  Parameter() = default;
  Parameter(std::string name, Tensor value, bool decay_exempt = false);

  std::size_t size() const { return value.size(); }
  void zero_grad() { grad.fill(0.0); }
};

struct OpCounter {
  std::uint64_t multiplies = 0;
  std::uint64_t adds = 0;

  friend bool operator==(const OpCounter&, const OpCounter&) = default;
};

class Tape;

/// Handle to a node on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Arguments handed to a node's backward rule. Gradient slots for inputs
/// that do not require a gradient are null.
struct BackwardArgs {
  const Tensor& grad_out;
  const Tensor& output;
  std::span<const Tensor* const> inputs;
  std::span<Tensor* const> input_grads;
};

using BackwardFn = std::function<void(const BackwardArgs&)>;

/// Gradients produced by one backward sweep, indexed by node.
class GradientMap {
 public:
  GradientMap() = default;
  explicit GradientMap(std::vector<std::optional<Tensor>> grads) : grads_(std::move(grads)) {}

  bool contains(Var v) const { return v.id < grads_.size() && grads_[v.id].has_value(); }
  /// Null when the node was not reached from the loss.
  const Tensor* find(Var v) const { return contains(v) ? &*grads_[v.id] : nullptr; }
  /// Gradient of v; zeros when v was unreachable.
  Tensor at(Var v) const;

 private:
  std::vector<std::optional<Tensor>> grads_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value);
  /// Leaf whose gradient is reported by backward.
  Var input(Tensor value);
  /// Leaf bound to a parameter; backward accumulates into p.grad.
  Var param(Parameter& p);

  /// Appends an operation node. The output is checked for finiteness.
  Var push(std::string_view op, Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  OpCounter& counter() { return counter_; }
  const OpCounter& counter() const { return counter_; }
  void count(std::uint64_t multiplies, std::uint64_t adds);

  /// Label attached to subsequently pushed nodes; used in error messages.
  void set_scope(std::string scope) { scope_ = std::move(scope); }
  const std::string& scope() const { return scope_; }

  /// Reverse sweep from a scalar loss. A tape can be swept once.
  GradientMap backward(Var loss);
  bool consumed() const { return consumed_; }

 private:
  struct Node {
    std::string op;
    std::string scope;
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  Var add_leaf(std::string_view op, Tensor value, bool requires_grad, Parameter* param);
  void check_owned(Var v) const;

  std::deque<Node> nodes_;  // stable addresses: ops hold value references across pushes
  OpCounter counter_;
  std::string scope_;
  bool consumed_ = false;
};

/// RAII scope label for a tape.
class ScopeGuard {
 public:
  ScopeGuard(Tape& tape, std::string scope) : tape_(tape), saved_(tape.scope()) { tape_.set_scope(std::move(scope)); }
  ~ScopeGuard() { tape_.set_scope(std::move(saved_)); }
  ScopeGuard(const ScopeGuard&) = delete;
  ScopeGuard& operator=(const ScopeGuard&) = delete;

 private:
  Tape& tape_;
  std::string saved_;
};

// Elementwise and reduction ops.
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var sum(Var a);
Var mean(Var a);
/// Scalar sum(a * weights) with constant weights.
Var weighted_sum(Var a, const Tensor& weights);
/// Same value, cut off from the gradient flow.
Var detach(Var a);
Var reshape(Var a, Shape shape);

Var relu(Var a);
Var relu6(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
/// Row-wise softmax of [N, C] logits divided by temperature.
Var softmax(Var logits, double temperature = 1.0);

Var matmul(Var a, Var b);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

/// Output spatial extent of a convolution along one axis.
std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding);

/// 2-D convolution, input NCHW, kernel [c_out, c_in/groups, k, k], no bias.
Var conv2d(Var input, Var kernel, Conv2dOptions options = {});

namespace kernels {

struct ConvGeometry {
  std::size_t c_in, c_out, h, w, k, stride, padding, groups, out_h, out_w;
  std::size_t c_in_per_group() const { return c_in / groups; }
  std::size_t c_out_per_group() const { return c_out / groups; }
  std::uint64_t multiplies_per_sample() const {
    return static_cast<std::uint64_t>(c_out) * out_h * out_w * c_in_per_group() * k * k;
  }
};

/// Validates shapes and derives the geometry of a convolution.
ConvGeometry conv_geometry(const Shape& input, const Shape& kernel, Conv2dOptions options);

/// Forward for one sample: out [c_out, out_h, out_w] += conv(in, kernel).
void conv_forward_sample(const ConvGeometry& g, const double* in, const double* kernel, double* out);
/// Backward for one sample. Either gradient destination may be null.
void conv_backward_sample(const ConvGeometry& g, const double* in, const double* kernel, const double* grad_out,
                          double* grad_in, double* grad_kernel);

}  // namespace kernels

}  // namespace sbattn
