#pragma once

#include <optional>
#include <vector>

#include "hiri/tape.hpp"

namespace hiri {

struct BatchNormOptions {
  double momentum = 0.1;
  double epsilon = 1e-5;
};

inline constexpr double kLayerNormEpsilon = 1e-6;

// Elementwise and reductions.
Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var sum(const Var& a);
/// sum(a * weights) with constant weights; used for projecting outputs to a scalar.
Var weighted_sum(const Var& a, const Array& weights);

// Layout.
Var reshape(const Var& a, Shape shape);
Var permute(const Var& a, std::vector<int> perm);
/// [N,C,H,W] -> [N,H*W,C]
Var to_tokens(const Var& x);
/// [N,H*W,C] -> [N,C,H,W]
Var to_spatial(const Var& tokens, Index height, Index width);

// Contractions.
Var conv2d(const Var& input, const Var& weight, const std::optional<Var>& bias, const Conv2dOptions& opts);
Var linear(const Var& input, const Var& weight, const std::optional<Var>& bias);
Var matmul(const Var& a, const Var& b);

// Normalization and activations.
Var softmax(const Var& input, int axis);
/// `running_mean`/`running_var` are read in eval mode and updated in train mode.
Var batch_norm(const Var& input, const Var& gamma, const Var& beta, Tensor& running_mean,
               Tensor& running_var, Mode mode, const BatchNormOptions& opts = {});
Var layer_norm(const Var& input, const Var& gamma, const Var& beta, double epsilon = kLayerNormEpsilon);
Var gelu(const Var& input);

// Resampling.
Var upsample_repeat(const Var& input, Index factor);
Var global_avg_pool(const Var& input);
Var avg_pool2x2(const Var& input);

/// -sum(target * log_softmax(logits)) averaged over the batch; logits [N,K].
Var soft_cross_entropy(const Var& logits, const Array& target);

}  // namespace hiri
