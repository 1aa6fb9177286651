#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sbattn/autodiff.hpp"

namespace sbattn {

enum class Mode { train, eval };

/// Fully-connected weights: weight [c_in, c_out], bias [c_out].
struct Linear {
  Parameter weight;
  Parameter bias;

  static Linear make(const std::string& name, std::size_t c_in, std::size_t c_out, std::mt19937_64& rng);
  std::size_t in_features() const { return weight.value.dim(0); }
  std::size_t out_features() const { return weight.value.dim(1); }
};

/// x [N, c_in] times weight plus broadcast bias. Counts N*c_in*c_out
/// multiplies and as many adds (bias adds folded in).
Var fully_connected(Tape& tape, Var x, Parameter& weight, Parameter& bias);
Var fully_connected(Tape& tape, Var x, Linear& layer);

struct BatchNormState {
  Parameter gamma;
  Parameter beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;
  Mode mode = Mode::train;

  static BatchNormState make(const std::string& name, std::size_t channels);
  std::size_t channels() const { return gamma.value.size(); }
};

/// Per-channel normalization of NCHW or [N, C] input. Train mode uses batch
/// statistics and updates the running estimates (unbiased variance); eval
/// mode applies the running estimates as a fixed affine map.
Var batch_norm(Tape& tape, Var x, BatchNormState& state);

/// [N, C, H, W] -> [N, C] spatial mean. Counts C multiplies and C*H*W adds per sample.
Var global_avg_pool(Var x);

enum class ActivationKind { relu, relu6, tanh, sigmoid, softmax_over_channels, identity };

/// softmax_over_channels requires [N, C] input; temperature divides the logits.
Var activation(Var x, ActivationKind kind, double temperature = 1.0);

struct DropoutConfig {
  double rate = 0.0;
  std::uint64_t rng_seed = 0;
};

/// Inverted dropout. The train-mode mask depends only on (rng_seed, call_index).
Var dropout(Var x, const DropoutConfig& config, Mode mode, std::uint64_t call_index);

/// Stateful wrapper that advances the call counter on every train-mode call.
struct Dropout {
  DropoutConfig config;
  std::uint64_t calls = 0;
  Mode mode = Mode::train;

  Var operator()(Var x);
};

/// Mean softmax cross-entropy of logits [N, K] against class labels.
Var cross_entropy(Var logits, std::span<const int> labels);

}  // namespace sbattn
