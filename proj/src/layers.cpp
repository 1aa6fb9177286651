#include "sbattn/layers.hpp"

#include <cmath>

#include "sbattn/errors.hpp"

namespace sbattn {

Linear Linear::make(const std::string& name, std::size_t c_in, std::size_t c_out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(c_in));
  Linear l;
  l.weight = Parameter(name + ".weight", random_uniform({c_in, c_out}, rng, -bound, bound));
  l.bias = Parameter(name + ".bias", random_uniform({c_out}, rng, -bound, bound));
  return l;
}

Var fully_connected(Tape& tape, Var x, Parameter& weight, Parameter& bias) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || weight.value.rank() != 2 || xv.dim(1) != weight.value.dim(0)) {
    throw DimensionError("fully_connected: input " + shape_str(xv.shape()) + " vs weight " +
                         shape_str(weight.value.shape()));
  }
  const std::size_t n = xv.dim(0), c_in = xv.dim(1), c_out = weight.value.dim(1);
  if (bias.value.shape() != Shape{c_out}) {
    throw DimensionError("fully_connected: bias " + shape_str(bias.value.shape()) + " for " + std::to_string(c_out) +
                         " outputs");
  }
  Var w = tape.param(weight);
  Var b = tape.param(bias);
  Tensor y({n, c_out});
  for (std::size_t i = 0; i < n; ++i) {
    double* row = y.raw() + i * c_out;
    for (std::size_t j = 0; j < c_out; ++j) row[j] = bias.value[j];
    for (std::size_t p = 0; p < c_in; ++p) {
      const double xv_ip = xv.at(i, p);
      const double* wrow = weight.value.raw() + p * c_out;
      for (std::size_t j = 0; j < c_out; ++j) row[j] += xv_ip * wrow[j];
    }
  }
  tape.count(n * c_in * c_out, n * c_in * c_out);
  return tape.push("fully_connected", std::move(y), {x, w, b}, [n, c_in, c_out](const BackwardArgs& args) {
    const Tensor& xv = *args.inputs[0];
    const Tensor& wv = *args.inputs[1];
    const Tensor& go = args.grad_out;
    if (Tensor* gx = args.input_grads[0]) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < c_in; ++p) {
          double s = 0.0;
          const double* wrow = wv.raw() + p * c_out;
          const double* grow = go.raw() + i * c_out;
          for (std::size_t j = 0; j < c_out; ++j) s += grow[j] * wrow[j];
          gx->at(i, p) += s;
        }
      }
    }
    if (Tensor* gw = args.input_grads[1]) {
      for (std::size_t i = 0; i < n; ++i) {
        const double* grow = go.raw() + i * c_out;
        for (std::size_t p = 0; p < c_in; ++p) {
          const double xip = xv.at(i, p);
          double* gwrow = gw->raw() + p * c_out;
          for (std::size_t j = 0; j < c_out; ++j) gwrow[j] += xip * grow[j];
        }
      }
    }
    if (Tensor* gb = args.input_grads[2]) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c_out; ++j) (*gb)[j] += go.at(i, j);
      }
    }
  });
}

Var fully_connected(Tape& tape, Var x, Linear& layer) { return fully_connected(tape, x, layer.weight, layer.bias); }

BatchNormState BatchNormState::make(const std::string& name, std::size_t channels) {
  BatchNormState s;
  s.gamma = Parameter(name + ".gamma", Tensor::ones({channels}), true);
  s.beta = Parameter(name + ".beta", Tensor::zeros({channels}), true);
  s.running_mean = Tensor::zeros({channels});
  s.running_var = Tensor::ones({channels});
  return s;
}

namespace {

struct ChannelLayout {
  std::size_t n, c, spatial;
  std::size_t index(std::size_t i, std::size_t ch, std::size_t s) const { return (i * c + ch) * spatial + s; }
};

ChannelLayout channel_layout(const Shape& shape, std::string_view op) {
  if (shape.size() == 2) return {shape[0], shape[1], 1};
  if (shape.size() == 4) return {shape[0], shape[1], shape[2] * shape[3]};
  throw DimensionError(std::string(op) + " expects NCHW or [N, C], got " + shape_str(shape));
}

}  // namespace

Var batch_norm(Tape& tape, Var x, BatchNormState& state) {
  const Tensor& xv = x.value();
  const ChannelLayout L = channel_layout(xv.shape(), "batch_norm");
  if (L.c != state.channels()) {
    throw DimensionError("batch_norm: input has " + std::to_string(L.c) + " channels, state has " +
                         std::to_string(state.channels()));
  }
  Var gamma = tape.param(state.gamma);
  Var beta = tape.param(state.beta);
  const std::size_t m = L.n * L.spatial;
  Tensor y(xv.shape());

  if (state.mode == Mode::eval) {
    Tensor inv_std({L.c});
    for (std::size_t ch = 0; ch < L.c; ++ch) inv_std[ch] = 1.0 / std::sqrt(state.running_var[ch] + state.epsilon);
    const Tensor mu = state.running_mean;
    for (std::size_t i = 0; i < L.n; ++i)
      for (std::size_t ch = 0; ch < L.c; ++ch)
        for (std::size_t s = 0; s < L.spatial; ++s) {
          const std::size_t k = L.index(i, ch, s);
          y[k] = state.gamma.value[ch] * (xv[k] - mu[ch]) * inv_std[ch] + state.beta.value[ch];
        }
    return tape.push("batch_norm", std::move(y), {x, gamma, beta}, [L, inv_std, mu](const BackwardArgs& args) {
      const Tensor& xv = *args.inputs[0];
      const Tensor& g = *args.inputs[1];
      Tensor* gx = args.input_grads[0];
      Tensor* gg = args.input_grads[1];
      Tensor* gb = args.input_grads[2];
      for (std::size_t i = 0; i < L.n; ++i)
        for (std::size_t ch = 0; ch < L.c; ++ch)
          for (std::size_t s = 0; s < L.spatial; ++s) {
            const std::size_t k = L.index(i, ch, s);
            const double go = args.grad_out[k];
            if (gx) (*gx)[k] += go * g[ch] * inv_std[ch];
            if (gg) (*gg)[ch] += go * (xv[k] - mu[ch]) * inv_std[ch];
            if (gb) (*gb)[ch] += go;
          }
    });
  }

  if (m < 2) {
    throw StatisticsError("batch_norm in train mode needs at least 2 values per channel, got " + std::to_string(m));
  }
  Tensor xhat(xv.shape());
  Tensor inv_std({L.c});
  for (std::size_t ch = 0; ch < L.c; ++ch) {
    double mu = 0.0;
    for (std::size_t i = 0; i < L.n; ++i)
      for (std::size_t s = 0; s < L.spatial; ++s) mu += xv[L.index(i, ch, s)];
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t i = 0; i < L.n; ++i)
      for (std::size_t s = 0; s < L.spatial; ++s) {
        const double d = xv[L.index(i, ch, s)] - mu;
        var += d * d;
      }
    var /= static_cast<double>(m);
    inv_std[ch] = 1.0 / std::sqrt(var + state.epsilon);
    for (std::size_t i = 0; i < L.n; ++i)
      for (std::size_t s = 0; s < L.spatial; ++s) {
        const std::size_t k = L.index(i, ch, s);
        xhat[k] = (xv[k] - mu) * inv_std[ch];
        y[k] = state.gamma.value[ch] * xhat[k] + state.beta.value[ch];
      }
    const double unbiased = var * static_cast<double>(m) / static_cast<double>(m - 1);
    state.running_mean[ch] = (1.0 - state.momentum) * state.running_mean[ch] + state.momentum * mu;
    state.running_var[ch] = (1.0 - state.momentum) * state.running_var[ch] + state.momentum * unbiased;
  }
  return tape.push("batch_norm", std::move(y), {x, gamma, beta}, [L, m, xhat, inv_std](const BackwardArgs& args) {
    const Tensor& g = *args.inputs[1];
    Tensor* gx = args.input_grads[0];
    Tensor* gg = args.input_grads[1];
    Tensor* gb = args.input_grads[2];
    const double inv_m = 1.0 / static_cast<double>(m);
    for (std::size_t ch = 0; ch < L.c; ++ch) {
      double sum_go = 0.0, sum_go_xhat = 0.0;
      for (std::size_t i = 0; i < L.n; ++i)
        for (std::size_t s = 0; s < L.spatial; ++s) {
          const std::size_t k = L.index(i, ch, s);
          sum_go += args.grad_out[k];
          sum_go_xhat += args.grad_out[k] * xhat[k];
        }
      if (gg) (*gg)[ch] += sum_go_xhat;
      if (gb) (*gb)[ch] += sum_go;
      if (!gx) continue;
      const double coef = g[ch] * inv_std[ch];
      for (std::size_t i = 0; i < L.n; ++i)
        for (std::size_t s = 0; s < L.spatial; ++s) {
          const std::size_t k = L.index(i, ch, s);
          (*gx)[k] += coef * (args.grad_out[k] - inv_m * sum_go - xhat[k] * inv_m * sum_go_xhat);
        }
    }
  });
}

Var global_avg_pool(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("global_avg_pool expects NCHW, got " + shape_str(xv.shape()));
  const std::size_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor y({n, c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* p = xv.raw() + (i * c + ch) * hw;
      double s = 0.0;
      for (std::size_t k = 0; k < hw; ++k) s += p[k];
      y.at(i, ch) = s / static_cast<double>(hw);
    }
  x.tape->count(n * c, n * c * hw);
  return x.tape->push("global_avg_pool", std::move(y), {x}, [n, c, hw](const BackwardArgs& args) {
    Tensor* gx = args.input_grads[0];
    if (!gx) return;
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double g = args.grad_out.at(i, ch) * inv;
        double* p = gx->raw() + (i * c + ch) * hw;
        for (std::size_t k = 0; k < hw; ++k) p[k] += g;
      }
  });
}

Var activation(Var x, ActivationKind kind, double temperature) {
  switch (kind) {
    case ActivationKind::relu:
      return relu(x);
    case ActivationKind::relu6:
      return relu6(x);
    case ActivationKind::tanh:
      return tanh(x);
    case ActivationKind::sigmoid:
      return sigmoid(x);
    case ActivationKind::softmax_over_channels:
      return softmax(x, temperature);
    case ActivationKind::identity:
      return x;
  }
  throw ConfigError("unknown activation kind");
}

Var dropout(Var x, const DropoutConfig& config, Mode mode, std::uint64_t call_index) {
  if (!(config.rate >= 0.0 && config.rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
  if (mode == Mode::eval || config.rate == 0.0) return x;
  const Tensor& xv = x.value();
  std::seed_seq seq{static_cast<std::uint32_t>(config.rng_seed), static_cast<std::uint32_t>(config.rng_seed >> 32),
                    static_cast<std::uint32_t>(call_index), static_cast<std::uint32_t>(call_index >> 32)};
  std::mt19937_64 rng(seq);
  std::bernoulli_distribution keep(1.0 - config.rate);
  const double scale_kept = 1.0 / (1.0 - config.rate);
  Tensor mask(xv.shape());
  for (double& v : mask.data()) v = keep(rng) ? scale_kept : 0.0;
  Tensor y = xv;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= mask[i];
  return x.tape->push("dropout", std::move(y), {x}, [mask](const BackwardArgs& args) {
    if (Tensor* gx = args.input_grads[0]) {
      for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += args.grad_out[i] * mask[i];
    }
  });
}

Var Dropout::operator()(Var x) {
  if (mode == Mode::eval || config.rate == 0.0) return x;
  return dropout(x, config, mode, calls++);
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& z = logits.value();
  if (z.rank() != 2 || z.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(z.shape()) + " for " + std::to_string(labels.size()) +
                         " labels");
  }
  const std::size_t n = z.dim(0), k = z.dim(1);
  Tensor probs({n, k});
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw ContractError("cross_entropy: label " + std::to_string(label) + " outside [0, " + std::to_string(k) + ")");
    }
    double mx = z.at(i, 0);
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, z.at(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(z.at(i, j) - mx);
    const double log_z = mx + std::log(s);
    for (std::size_t j = 0; j < k; ++j) probs.at(i, j) = std::exp(z.at(i, j) - log_z);
    loss += log_z - z.at(i, static_cast<std::size_t>(label));
  }
  loss /= static_cast<double>(n);
  std::vector<int> saved(labels.begin(), labels.end());
  return logits.tape->push("cross_entropy", Tensor::scalar(loss), {logits}, [probs, saved, n, k](const BackwardArgs& args) {
    Tensor* gz = args.input_grads[0];
    if (!gz) return;
    const double go = args.grad_out[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        const double target = static_cast<std::size_t>(saved[i]) == j ? 1.0 : 0.0;
        gz->at(i, j) += go * (probs.at(i, j) - target);
      }
  });
}

}  // namespace sbattn
