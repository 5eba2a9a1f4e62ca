#pragma once

// Parameterized primitive layers shared by the composite blocks. Each layer
// declares its tensors (for allocation and counting), runs its forward on a
// Tape, infers output shapes without data, and tallies its analytic cost.

#include <cstdint>
#include <string>
#include <vector>

#include "hiri/ops.hpp"
#include "hiri/param_tree.hpp"

namespace hiri {

enum class Init { TruncNormal, Zeros, Ones };

inline constexpr double kInitStddev = 0.02;

struct ParamSpec {
  std::string path;
  Shape shape;
  Init init = Init::TruncNormal;
  bool learnable = true;
};

/// Allocates and initializes tensors for `specs` in order.
ParamTree make_params(const std::vector<ParamSpec>& specs, Rng& rng);

/// Multiply-accumulates and elementwise ops of one forward pass.
struct CostTally {
  std::uint64_t macs = 0;
  std::uint64_t elementwise = 0;

  CostTally& operator+=(const CostTally& other) {
    macs += other.macs;
    elementwise += other.elementwise;
    return *this;
  }
  bool operator==(const CostTally&) const = default;
};

inline CostTally elementwise_cost(const Shape& shape) { return {0, static_cast<std::uint64_t>(numel(shape))}; }

/// Everything a forward pass needs besides its input.
struct Context {
  Tape& tape;
  ParamTree& params;
  Mode mode = Mode::Eval;
  BatchNormOptions batch_norm{};

  Var param(const std::string& path) const { return tape.bind(params.at(path)); }
};

enum class NormKind { Batch, Layer };

const char* to_string(NormKind kind);

struct Conv2dLayer {
  std::string path;
  Index in_channels = 0;
  Index out_channels = 0;
  Index kernel = 1;
  Index stride = 1;
  Index pad = 0;
  Index groups = 1;
  bool bias = true;

  /// k x k convolution with the shape-preserving padding floor(k/2).
  static Conv2dLayer make(std::string path, Index in, Index out, Index kernel, Index stride = 1, Index groups = 1);
  /// Depth-wise k x k convolution.
  static Conv2dLayer depthwise(std::string path, Index channels, Index kernel, Index stride = 1);

  Conv2dOptions options() const { return Conv2dOptions::make(stride, pad, groups); }
  void declare(std::vector<ParamSpec>& specs) const;
  Var forward(const Context& ctx, const Var& x) const;
  Shape output_shape(const Shape& in) const;
  CostTally cost(const Shape& in) const;
};

struct LinearLayer {
  std::string path;
  Index in_features = 0;
  Index out_features = 0;
  bool bias = true;

  void declare(std::vector<ParamSpec>& specs) const;
  Var forward(const Context& ctx, const Var& x) const;
  Shape output_shape(const Shape& in) const;
  CostTally cost(const Shape& in) const;
};

/// Normalization of a [N,C,H,W] map: BN over (N,H,W) or LN over C per position.
struct Norm2d {
  std::string path;
  Index channels = 0;
  NormKind kind = NormKind::Batch;

  void declare(std::vector<ParamSpec>& specs) const;
  Var forward(const Context& ctx, const Var& x) const;
  CostTally cost(const Shape& in) const { return elementwise_cost(in); }
};

/// Layer normalization over the last axis of a token tensor.
struct TokenLayerNorm {
  std::string path;
  Index dim = 0;

  void declare(std::vector<ParamSpec>& specs) const;
  Var forward(const Context& ctx, const Var& x) const;
  CostTally cost(const Shape& in) const { return elementwise_cost(in); }
};

}  // namespace hiri
