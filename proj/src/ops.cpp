#include "hiri/ops.hpp"

#include <cmath>
#include <memory>

namespace hiri {
namespace {

void require_same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands live on different tapes");
}

void require_rank(const Var& v, int rank, const char* op) {
  if (v.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(v.shape()));
  }
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_tape(a, b);
  a.value().require_same_shape(b.value(), "add");
  Tape& tape = a.tape();
  Array out = with_counter(tape, [&](auto& count) {
    Array y(a.shape());
    for (Index i = 0; i < y.size(); ++i) {
      y[i] = a.value()[i] + b.value()[i];
      count.elem();
    }
    return y;
  });
  return tape.record("add", std::move(out), {a, b}, [a, b](Tape& t, const Array& g) {
    if (Array* ga = t.grad_sink(a)) *ga += g;
    if (Array* gb = t.grad_sink(b)) *gb += g;
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  a.value().require_same_shape(b.value(), "mul");
  Tape& tape = a.tape();
  Array out = with_counter(tape, [&](auto& count) {
    Array y(a.shape());
    for (Index i = 0; i < y.size(); ++i) {
      y[i] = a.value()[i] * b.value()[i];
      count.elem();
    }
    return y;
  });
  return tape.record("mul", std::move(out), {a, b}, [a, b](Tape& t, const Array& g) {
    if (Array* ga = t.grad_sink(a)) {
      for (Index i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b.value()[i];
    }
    if (Array* gb = t.grad_sink(b)) {
      for (Index i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a.value()[i];
    }
  });
}

Var scale(const Var& a, double factor) {
  Tape& tape = a.tape();
  Array out = with_counter(tape, [&](auto& count) {
    Array y(a.shape());
    for (Index i = 0; i < y.size(); ++i) {
      y[i] = a.value()[i] * factor;
      count.elem();
    }
    return y;
  });
  return tape.record("scale", std::move(out), {a}, [a, factor](Tape& t, const Array& g) {
    if (Array* ga = t.grad_sink(a)) {
      for (Index i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * factor;
    }
  });
}

Var sum(const Var& a) {
  double total = 0.0;
  for (const double v : a.value().values()) total += v;
  return a.tape().record("sum", Array(Shape{}, {total}), {a}, [a](Tape& t, const Array& g) {
    if (Array* ga = t.grad_sink(a)) {
      for (Index i = 0; i < ga->size(); ++i) (*ga)[i] += g[0];
    }
  });
}

Var weighted_sum(const Var& a, const Array& weights) {
  a.value().require_same_shape(weights, "weighted_sum");
  double total = 0.0;
  for (Index i = 0; i < weights.size(); ++i) total += a.value()[i] * weights[i];
  return a.tape().record("weighted_sum", Array(Shape{}, {total}), {a}, [a, weights](Tape& t, const Array& g) {
    if (Array* ga = t.grad_sink(a)) {
      for (Index i = 0; i < ga->size(); ++i) (*ga)[i] += g[0] * weights[i];
    }
  });
}

Var reshape(const Var& a, Shape shape) {
  Array out = a.value().reshaped(std::move(shape));
  return a.tape().record("reshape", std::move(out), {a}, [a](Tape& t, const Array& g) {
    if (Array* ga = t.grad_sink(a)) {
      for (Index i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
  });
}

Var permute(const Var& a, std::vector<int> perm) {
  if (static_cast<int>(perm.size()) != a.rank()) {
    throw DimensionError("permute: permutation length does not match rank of " + shape_string(a.shape()));
  }
  Array out = kernels::permute(a.value(), perm);
  return a.tape().record("permute", std::move(out), {a}, [a, perm](Tape& t, const Array& g) {
    if (Array* ga = t.grad_sink(a)) *ga += kernels::permute(g, kernels::inverse_permutation(perm));
  });
}

Var to_tokens(const Var& x) {
  require_rank(x, 4, "to_tokens");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  return reshape(permute(x, {0, 2, 3, 1}), {n, hw, c});
}

Var to_spatial(const Var& tokens, Index height, Index width) {
  require_rank(tokens, 3, "to_spatial");
  if (tokens.dim(1) != height * width) {
    throw DimensionError("to_spatial: " + std::to_string(tokens.dim(1)) + " tokens cannot form a " +
                         std::to_string(height) + "x" + std::to_string(width) + " grid");
  }
  return permute(reshape(tokens, {tokens.dim(0), height, width, tokens.dim(2)}), {0, 3, 1, 2});
}

Var conv2d(const Var& input, const Var& weight, const std::optional<Var>& bias, const Conv2dOptions& opts) {
  require_same_tape(input, weight);
  const ConvGeometry g = conv_geometry(input.shape(), weight.shape(), opts);
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.out_channels)) {
    throw DimensionError("conv2d: bias shape " + shape_string(bias->shape()) + " does not match " +
                         std::to_string(g.out_channels) + " output channels");
  }
  Tape& tape = input.tape();
  const Array* b = bias ? &bias->value() : nullptr;
  Array out = with_counter(tape, [&](auto& count) {
    return kernels::conv2d_forward(input.value(), weight.value(), b, g, count);
  });
  const Var bias_var = bias.value_or(Var{});
  return tape.record("conv2d", std::move(out), {input, weight, bias_var},
                     [input, weight, bias_var, g](Tape& t, const Array& gy) {
                       Array* gb = bias_var.valid() ? t.grad_sink(bias_var) : nullptr;
                       kernels::conv2d_backward(input.value(), weight.value(), gy, g, t.grad_sink(input),
                                                t.grad_sink(weight), gb);
                     });
}

Var linear(const Var& input, const Var& weight, const std::optional<Var>& bias) {
  require_same_tape(input, weight);
  require_rank(weight, 2, "linear weight");
  if (input.rank() < 1 || input.dim(-1) != weight.dim(1)) {
    throw DimensionError("linear: input " + shape_string(input.shape()) + " last axis does not match weight " +
                         shape_string(weight.shape()));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != weight.dim(0))) {
    throw DimensionError("linear: bias shape " + shape_string(bias->shape()) + " vs weight " +
                         shape_string(weight.shape()));
  }
  Tape& tape = input.tape();
  const Array* b = bias ? &bias->value() : nullptr;
  Array out = with_counter(tape, [&](auto& count) {
    return kernels::linear_forward(input.value(), weight.value(), b, count);
  });
  const Var bias_var = bias.value_or(Var{});
  return tape.record("linear", std::move(out), {input, weight, bias_var},
                     [input, weight, bias_var](Tape& t, const Array& gy) {
                       Array* gb = bias_var.valid() ? t.grad_sink(bias_var) : nullptr;
                       kernels::linear_backward(input.value(), weight.value(), gy, t.grad_sink(input),
                                                t.grad_sink(weight), gb);
                     });
}

Var matmul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  const kernels::MatmulLayout layout = kernels::matmul_layout(a.shape(), b.shape());
  Tape& tape = a.tape();
  Array out = with_counter(tape, [&](auto& count) {
    return kernels::matmul_forward(a.value(), b.value(), layout, count);
  });
  return tape.record("matmul", std::move(out), {a, b}, [a, b, layout](Tape& t, const Array& gy) {
    kernels::matmul_backward(a.value(), b.value(), gy, layout, t.grad_sink(a), t.grad_sink(b));
  });
}

Var softmax(const Var& input, int axis) {
  const int resolved = normalize_axis(axis, input.rank());
  Tape& tape = input.tape();
  Array out = with_counter(tape, [&](auto& count) {
    return kernels::softmax_forward(input.value(), resolved, count);
  });
  // The output node is the one being recorded; its value is read back at backward time.
  auto self = std::make_shared<Var>();
  Var y = tape.record("softmax", std::move(out), {input}, [input, resolved, self](Tape& t, const Array& gy) {
    if (Array* gx = t.grad_sink(input)) kernels::softmax_backward(self->value(), gy, resolved, *gx);
  });
  *self = y;
  return y;
}

Var batch_norm(const Var& input, const Var& gamma, const Var& beta, Tensor& running_mean, Tensor& running_var,
               Mode mode, const BatchNormOptions& opts) {
  require_rank(input, 4, "batch_norm");
  if (!(opts.epsilon > 0.0)) throw ConfigError("batch_norm: epsilon must be positive");
  const Index channels = input.dim(1);
  for (const Shape& s : {gamma.shape(), beta.shape(), running_mean.shape(), running_var.shape()}) {
    if (s != Shape{channels}) {
      throw DimensionError("batch_norm: per-channel tensor " + shape_string(s) + " vs " +
                           std::to_string(channels) + " channels");
    }
  }
  const Index count_per_channel = input.dim(0) * input.dim(2) * input.dim(3);
  if (count_per_channel < 1) throw DimensionError("batch_norm: empty batch");
  const bool train = mode == Mode::Train;
  if (train && count_per_channel < 2) {
    throw DimensionError("batch_norm: train mode needs at least 2 values per channel, got shape " +
                         shape_string(input.shape()));
  }
  Tape& tape = input.tape();
  auto cache = std::make_shared<kernels::NormCache<double>>();
  const double* eval_mean = train ? nullptr : running_mean.data().data();
  const double* eval_var = train ? nullptr : running_var.data().data();
  Array out = with_counter(tape, [&](auto& count) {
    return kernels::batch_norm_forward(input.value(), gamma.value(), beta.value(), eval_mean, eval_var,
                                       opts.epsilon, *cache, count);
  });
  if (train) {
    const double unbias = static_cast<double>(count_per_channel) / static_cast<double>(count_per_channel - 1);
    for (Index c = 0; c < channels; ++c) {
      const auto uc = static_cast<std::size_t>(c);
      running_mean.data()[c] = (1.0 - opts.momentum) * running_mean.data()[c] + opts.momentum * cache->mean[uc];
      running_var.data()[c] =
          (1.0 - opts.momentum) * running_var.data()[c] + opts.momentum * cache->var[uc] * unbias;
    }
  }
  return tape.record("batch_norm", std::move(out), {input, gamma, beta},
                     [input, gamma, beta, cache, train](Tape& t, const Array& gy) {
                       kernels::batch_norm_backward(gy, gamma.value(), *cache, train, t.grad_sink(input),
                                                    t.grad_sink(gamma), t.grad_sink(beta));
                     });
}

Var layer_norm(const Var& input, const Var& gamma, const Var& beta, double epsilon) {
  if (!(epsilon > 0.0)) throw ConfigError("layer_norm: epsilon must be positive");
  const Index d = input.dim(-1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm: affine shape " + shape_string(gamma.shape()) + " vs last axis " +
                         std::to_string(d));
  }
  Tape& tape = input.tape();
  auto cache = std::make_shared<kernels::NormCache<double>>();
  Array out = with_counter(tape, [&](auto& count) {
    return kernels::layer_norm_forward(input.value(), gamma.value(), beta.value(), epsilon, *cache, count);
  });
  return tape.record("layer_norm", std::move(out), {input, gamma, beta},
                     [input, gamma, beta, cache](Tape& t, const Array& gy) {
                       kernels::layer_norm_backward(gy, gamma.value(), *cache, t.grad_sink(input),
                                                    t.grad_sink(gamma), t.grad_sink(beta));
                     });
}

Var gelu(const Var& input) {
  Tape& tape = input.tape();
  Array out = with_counter(tape, [&](auto& count) { return kernels::gelu_forward(input.value(), count); });
  return tape.record("gelu", std::move(out), {input}, [input](Tape& t, const Array& gy) {
    if (Array* gx = t.grad_sink(input)) {
      const Array& x = input.value();
      for (Index i = 0; i < x.size(); ++i) (*gx)[i] += gy[i] * kernels::gelu_derivative(x[i]);
    }
  });
}

Var upsample_repeat(const Var& input, Index factor) {
  require_rank(input, 4, "upsample_repeat");
  if (factor < 1) throw ConfigError("upsample_repeat: factor must be >= 1");
  Array out = kernels::upsample_repeat_forward(input.value(), factor);
  return input.tape().record("upsample_repeat", std::move(out), {input}, [input, factor](Tape& t, const Array& gy) {
    if (Array* gx = t.grad_sink(input)) kernels::upsample_repeat_backward(gy, factor, *gx);
  });
}

Var global_avg_pool(const Var& input) {
  require_rank(input, 4, "global_avg_pool");
  Tape& tape = input.tape();
  Array out = with_counter(tape, [&](auto& count) { return kernels::global_avg_pool_forward(input.value(), count); });
  return tape.record("global_avg_pool", std::move(out), {input}, [input](Tape& t, const Array& gy) {
    if (Array* gx = t.grad_sink(input)) {
      const Index plane = input.dim(2) * input.dim(3);
      for (Index i = 0; i < gy.size(); ++i) {
        const double share = gy[i] / static_cast<double>(plane);
        for (Index p = 0; p < plane; ++p) (*gx)[i * plane + p] += share;
      }
    }
  });
}

Var avg_pool2x2(const Var& input) {
  require_rank(input, 4, "avg_pool2x2");
  Tape& tape = input.tape();
  Array out = with_counter(tape, [&](auto& count) { return kernels::avg_pool2x2_forward(input.value(), count); });
  return tape.record("avg_pool2x2", std::move(out), {input}, [input](Tape& t, const Array& gy) {
    if (Array* gx = t.grad_sink(input)) kernels::avg_pool2x2_backward(gy, input.shape(), *gx);
  });
}

Var soft_cross_entropy(const Var& logits, const Array& target) {
  require_rank(logits, 2, "soft_cross_entropy");
  logits.value().require_same_shape(target, "soft_cross_entropy target");
  const Index n = logits.dim(0), k = logits.dim(1);
  auto probs = std::make_shared<Array>(logits.shape());
  double loss = 0.0;
  for (Index r = 0; r < n; ++r) {
    const double* z = logits.value().data() + r * k;
    double peak = z[0];
    for (Index j = 1; j < k; ++j) peak = std::max(peak, z[j]);
    double total = 0.0;
    for (Index j = 0; j < k; ++j) total += std::exp(z[j] - peak);
    const double log_total = std::log(total) + peak;
    for (Index j = 0; j < k; ++j) {
      (*probs)[r * k + j] = std::exp(z[j] - log_total);
      loss -= target[r * k + j] * (z[j] - log_total);
    }
  }
  loss /= static_cast<double>(n);
  return logits.tape().record("soft_cross_entropy", Array(Shape{}, {loss}), {logits},
                              [logits, target, probs, n, k](Tape& t, const Array& g) {
                                Array* gx = t.grad_sink(logits);
                                if (gx == nullptr) return;
                                for (Index r = 0; r < n; ++r) {
                                  double mass = 0.0;
                                  for (Index j = 0; j < k; ++j) mass += target[r * k + j];
                                  for (Index j = 0; j < k; ++j) {
                                    (*gx)[r * k + j] += g[0] * (mass * (*probs)[r * k + j] - target[r * k + j]) /
                                                        static_cast<double>(n);
                                  }
                                }
                              });
}

}  // namespace hiri
