#pragma once

// Channel attention around a convolution.
//
//   scaled (SE):         y = A(x) * T(x),          A = sigmoid(F(x))
//   shift-and-balance:   y = T(x) + lambda * A(x), A = tanh(F(x))
//   dynamic conv:        y = (sum_i pi_i(x) W_i) * x, pi = softmax(F(x) / temperature) by default
//
// F is the light branch GAP -> FC -> BN -> ReLU -> FC producing one value per
// output channel (or per expert for dynamic convolution). A(x) is broadcast
// along the spatial axes of the trunk output T(x).

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "sbattn/autodiff.hpp"
#include "sbattn/layers.hpp"

namespace sbattn {

enum class GateKind { tanh, sigmoid, softmax, relu, none };
enum class Mechanism { none, se, sb, dyconv };

std::string_view to_string(GateKind gate);
std::string_view to_string(Mechanism mechanism);
GateKind parse_gate(std::string_view text);
/// Accepts "static" or "none" for the attention-free mechanism.
Mechanism parse_mechanism(std::string_view text);

/// The gate a mechanism uses unless configured otherwise.
GateKind default_gate(Mechanism mechanism);

struct AttentionBranch {
  Linear fc1;
  BatchNormState bn;
  Linear fc2;
  GateKind gate = GateKind::tanh;
  /// Divisor applied to the logits of a softmax gate.
  double temperature = 1.0;
  /// Place BN after the hidden ReLU instead of before it.
  bool bn_after_relu = false;
  Dropout hidden_dropout;

  static AttentionBranch make(const std::string& name, std::size_t c_in, std::size_t c_hidden, std::size_t c_out,
                              GateKind gate, std::mt19937_64& rng);

  std::size_t c_in() const { return fc1.in_features(); }
  std::size_t c_hidden() const { return fc1.out_features(); }
  std::size_t c_out() const { return fc2.out_features(); }
  std::size_t parameter_count() const;
  void set_mode(Mode mode);
  void collect(std::vector<Parameter*>& out);
};

/// Pre-gate branch output z = F(x), shape [N, c_out].
Var attention_branch_logits(Tape& tape, Var x, AttentionBranch& branch);
/// Gated branch output a = gate(F(x)), shape [N, c_out].
Var attention_branch_forward(Tape& tape, Var x, AttentionBranch& branch);
/// Applies a gate to [N, C] logits.
Var apply_gate(Var z, GateKind gate, double temperature = 1.0);

struct SBParams {
  Parameter lambda;
  double init_value = 0.1;

  static SBParams make(const std::string& name, std::size_t channels, double init_value = 0.1);
};

/// y[n,c,h,w] = a[n,c] * t[n,c,h,w]. Counts N*C*H*W multiplies.
Var se_combine(Var t, Var a);
/// y[n,c,h,w] = t[n,c,h,w] + lambda[c] * a[n,c]. Counts N*C multiplies, N*C*H*W adds.
Var sb_combine(Var t, Var a, Var lambda);
Var sb_combine(Tape& tape, Var t, Var a, SBParams& sb);

struct DyConvExperts {
  std::vector<Parameter> experts;
  double temperature = 30.0;
  AttentionBranch branch;

  /// Experts are drawn independently with the trunk initializer. Only the
  /// softmax gate keeps the mixing weights on the simplex.
  static DyConvExperts make(const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t kernel,
                            std::size_t groups, std::size_t n, double temperature, std::size_t c_hidden,
                            std::mt19937_64& rng, GateKind gate = GateKind::softmax);

  std::size_t n() const { return experts.size(); }
  void set_mode(Mode mode) { branch.set_mode(mode); }
  void collect(std::vector<Parameter*>& out);
};

/// Per-sample mixing weights pi(x), shape [N, n]. Rows lie on the simplex
/// under the softmax gate.
Var dyconv_attention(Tape& tape, Var x, DyConvExperts& d);

/// Convolves sample i with sum_j pi[i,j] * experts[j].
Var dyconv(Var x, Var pi, const std::vector<Var>& experts, Conv2dOptions options);
Var dyconv_forward(Tape& tape, Var x, DyConvExperts& d, Conv2dOptions options);

/// Fan-out normalized Gaussian used for every trunk kernel.
Tensor trunk_kernel_init(std::size_t c_out, std::size_t c_in_per_group, std::size_t k, std::mt19937_64& rng);

struct AttentionSettings {
  Mechanism mechanism = Mechanism::none;
  GateKind gate = GateKind::tanh;
  std::size_t c_hidden = 1;
  double lambda_init = 0.1;
  std::size_t experts = 4;
  double temperature = 30.0;
  bool bn_after_relu = false;
  double branch_dropout = 0.0;
};

/// A convolution with optional attention. Without attention it is a plain
/// bias-free conv2d.
struct AttentiveConv {
  std::string name;
  std::size_t c_in = 0, c_out = 0, kernel = 1;
  Conv2dOptions options;
  Mechanism mechanism = Mechanism::none;
  Parameter weight;
  std::optional<AttentionBranch> branch;
  std::optional<SBParams> sb;
  std::optional<DyConvExperts> dynamic;

  static AttentiveConv make(const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t kernel,
                            Conv2dOptions options, const AttentionSettings& settings, std::mt19937_64& rng);

  Var forward(Tape& tape, Var x);
  /// Kernel weights only: the trunk kernel, or all experts for dynamic convolution.
  std::size_t kernel_parameter_count() const;
  std::size_t attention_parameter_count() const;
  void set_mode(Mode mode);
  void collect(std::vector<Parameter*>& out);
};

}  // namespace sbattn
