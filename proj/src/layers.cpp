#include "hiri/layers.hpp"

namespace hiri {

ParamTree make_params(const std::vector<ParamSpec>& specs, Rng& rng) {
  ParamTree tree;
  for (const ParamSpec& spec : specs) {
    Array value;
    switch (spec.init) {
      case Init::TruncNormal:
        value = truncated_normal(spec.shape, kInitStddev, rng);
        break;
      case Init::Zeros:
        value = Array(spec.shape, 0.0);
        break;
      case Init::Ones:
        value = Array(spec.shape, 1.0);
        break;
    }
    tree.add(spec.path, std::move(value), spec.learnable);
  }
  return tree;
}

const char* to_string(NormKind kind) { return kind == NormKind::Batch ? "bn" : "ln"; }

Conv2dLayer Conv2dLayer::make(std::string path, Index in, Index out, Index kernel, Index stride, Index groups) {
  return {std::move(path), in, out, kernel, stride, kernel / 2, groups, true};
}

Conv2dLayer Conv2dLayer::depthwise(std::string path, Index channels, Index kernel, Index stride) {
  return make(std::move(path), channels, channels, kernel, stride, channels);
}

void Conv2dLayer::declare(std::vector<ParamSpec>& specs) const {
  specs.push_back({path + ".weight", {out_channels, in_channels / groups, kernel, kernel}});
  if (bias) specs.push_back({path + ".bias", {out_channels}, Init::Zeros});
}

Var Conv2dLayer::forward(const Context& ctx, const Var& x) const {
  std::optional<Var> b;
  if (bias) b = ctx.param(path + ".bias");
  return conv2d(x, ctx.param(path + ".weight"), b, options());
}

Shape Conv2dLayer::output_shape(const Shape& in) const {
  const ConvGeometry g = conv_geometry(in, {out_channels, in_channels / groups, kernel, kernel}, options());
  return {g.batch, g.out_channels, g.out_h, g.out_w};
}

CostTally Conv2dLayer::cost(const Shape& in) const {
  const Shape out = output_shape(in);
  const auto outputs = static_cast<std::uint64_t>(numel(out));
  const auto taps = static_cast<std::uint64_t>((in_channels / groups) * kernel * kernel);
  return {outputs * taps, bias ? outputs : 0};
}

void LinearLayer::declare(std::vector<ParamSpec>& specs) const {
  specs.push_back({path + ".weight", {out_features, in_features}});
  if (bias) specs.push_back({path + ".bias", {out_features}, Init::Zeros});
}

Var LinearLayer::forward(const Context& ctx, const Var& x) const {
  std::optional<Var> b;
  if (bias) b = ctx.param(path + ".bias");
  return linear(x, ctx.param(path + ".weight"), b);
}

Shape LinearLayer::output_shape(const Shape& in) const {
  if (in.empty() || in.back() != in_features) {
    throw DimensionError(path + ": input " + shape_string(in) + " does not end in " + std::to_string(in_features));
  }
  Shape out = in;
  out.back() = out_features;
  return out;
}

CostTally LinearLayer::cost(const Shape& in) const {
  const auto rows = static_cast<std::uint64_t>(numel(in) / in_features);
  const auto outputs = rows * static_cast<std::uint64_t>(out_features);
  return {outputs * static_cast<std::uint64_t>(in_features), bias ? outputs : 0};
}

void Norm2d::declare(std::vector<ParamSpec>& specs) const {
  specs.push_back({path + ".weight", {channels}, Init::Ones});
  specs.push_back({path + ".bias", {channels}, Init::Zeros});
  if (kind == NormKind::Batch) {
    specs.push_back({path + ".running_mean", {channels}, Init::Zeros, false});
    specs.push_back({path + ".running_var", {channels}, Init::Ones, false});
  }
}

Var Norm2d::forward(const Context& ctx, const Var& x) const {
  const Var gamma = ctx.param(path + ".weight");
  const Var beta = ctx.param(path + ".bias");
  if (kind == NormKind::Batch) {
    return batch_norm(x, gamma, beta, ctx.params.at(path + ".running_mean"), ctx.params.at(path + ".running_var"),
                      ctx.mode, ctx.batch_norm);
  }
  return permute(layer_norm(permute(x, {0, 2, 3, 1}), gamma, beta), {0, 3, 1, 2});
}

void TokenLayerNorm::declare(std::vector<ParamSpec>& specs) const {
  specs.push_back({path + ".weight", {dim}, Init::Ones});
  specs.push_back({path + ".bias", {dim}, Init::Zeros});
}

Var TokenLayerNorm::forward(const Context& ctx, const Var& x) const {
  return layer_norm(x, ctx.param(path + ".weight"), ctx.param(path + ".bias"));
}

}  // namespace hiri
