#include "hiri/blocks.hpp"

#include <cmath>

namespace hiri {

std::vector<ParamSpec> Module::param_specs() const {
  std::vector<ParamSpec> specs;
  declare(specs);
  return specs;
}

Index Module::param_count() const {
  Index total = 0;
  for (const ParamSpec& s : param_specs()) {
    if (s.learnable) total += numel(s.shape);
  }
  return total;
}

void Module::require_map(const Shape& in, Index channels) const {
  if (in.size() != 4 || in[1] != channels) {
    throw DimensionError(path_ + " (" + kind() + "): expected [N," + std::to_string(channels) + ",H,W], got " +
                         shape_string(in));
  }
}

namespace {

// A bias directly before batch norm is cancelled by the mean subtraction.
Conv2dLayer no_bias(Conv2dLayer conv) {
  conv.bias = false;
  return conv;
}

}  // namespace

// ---------------------------------------------------------------- stems

HrStem::HrStem(std::string path, Index in_channels, Index mid_channels, Index out_channels)
    : Module(std::move(path)),
      in_(in_channels),
      mid_(mid_channels),
      out_(out_channels),
      conv0_(no_bias(Conv2dLayer::make(sub("conv0"), in_, mid_, 3, 2))),
      bn0_{sub("bn0"), mid_, NormKind::Batch},
      hi_dw_(Conv2dLayer::depthwise(sub("hi_dw"), mid_, 3)),
      hi_conv_(no_bias(Conv2dLayer::make(sub("hi_conv"), mid_, out_, 3, 2))),
      lo_conv1_(Conv2dLayer::make(sub("lo_conv1"), mid_, out_, 3, 2)),
      lo_conv2_(Conv2dLayer::make(sub("lo_conv2"), out_, out_, 3)),
      lo_conv3_(no_bias(Conv2dLayer::make(sub("lo_conv3"), out_, out_, 1))),
      bn_out_{sub("bn_out"), out_, NormKind::Batch} {}

void HrStem::declare(std::vector<ParamSpec>& specs) const {
  conv0_.declare(specs);
  bn0_.declare(specs);
  hi_dw_.declare(specs);
  hi_conv_.declare(specs);
  lo_conv1_.declare(specs);
  lo_conv2_.declare(specs);
  lo_conv3_.declare(specs);
  bn_out_.declare(specs);
}

Shape HrStem::output_shape(const Shape& in) const {
  require_map(in, in_);
  if (in[2] % 4 != 0 || in[3] % 4 != 0) {
    throw ResolutionError(path() + " (hr_stem): input " + std::to_string(in[2]) + "x" + std::to_string(in[3]) +
                          " is not divisible by 4");
  }
  return {in[0], out_, in[2] / 4, in[3] / 4};
}

Var HrStem::forward(const Context& ctx, const Var& x) const {
  output_shape(x.shape());
  const Var s = gelu(bn0_.forward(ctx, conv0_.forward(ctx, x)));
  const Var hi = hi_conv_.forward(ctx, hi_dw_.forward(ctx, s));
  Var lo = gelu(lo_conv1_.forward(ctx, s));
  lo = gelu(lo_conv2_.forward(ctx, lo));
  lo = lo_conv3_.forward(ctx, lo);
  return bn_out_.forward(ctx, add(hi, lo));
}

CostTally HrStem::cost(const Shape& in) const {
  const Shape out = output_shape(in);
  const Shape half = conv0_.output_shape(in);
  CostTally c = conv0_.cost(in);
  c += bn0_.cost(half);
  c += elementwise_cost(half);  // gelu
  c += hi_dw_.cost(half);
  c += hi_conv_.cost(half);
  c += lo_conv1_.cost(half);
  c += elementwise_cost(out);
  c += lo_conv2_.cost(out);
  c += elementwise_cost(out);
  c += lo_conv3_.cost(out);
  c += elementwise_cost(out);  // branch sum
  c += bn_out_.cost(out);
  return c;
}

ConvStem::ConvStem(std::string path, Index in_channels, Index mid_channels, Index out_channels)
    : Module(std::move(path)),
      in_(in_channels),
      out_(out_channels),
      conv1_(no_bias(Conv2dLayer::make(sub("conv1"), in_channels, mid_channels, 3, 2))),
      conv2_(no_bias(Conv2dLayer::make(sub("conv2"), mid_channels, mid_channels, 3))),
      conv3_(no_bias(Conv2dLayer::make(sub("conv3"), mid_channels, out_channels, 3, 2))),
      bn1_{sub("bn1"), mid_channels, NormKind::Batch},
      bn2_{sub("bn2"), mid_channels, NormKind::Batch},
      bn3_{sub("bn3"), out_channels, NormKind::Batch} {}

void ConvStem::declare(std::vector<ParamSpec>& specs) const {
  conv1_.declare(specs);
  bn1_.declare(specs);
  conv2_.declare(specs);
  bn2_.declare(specs);
  conv3_.declare(specs);
  bn3_.declare(specs);
}

Shape ConvStem::output_shape(const Shape& in) const {
  require_map(in, in_);
  return conv3_.output_shape(conv2_.output_shape(conv1_.output_shape(in)));
}

Var ConvStem::forward(const Context& ctx, const Var& x) const {
  output_shape(x.shape());
  Var y = gelu(bn1_.forward(ctx, conv1_.forward(ctx, x)));
  y = gelu(bn2_.forward(ctx, conv2_.forward(ctx, y)));
  return bn3_.forward(ctx, conv3_.forward(ctx, y));
}

CostTally ConvStem::cost(const Shape& in) const {
  const Shape s1 = conv1_.output_shape(in);
  const Shape s3 = output_shape(in);
  CostTally c = conv1_.cost(in);
  c += bn1_.cost(s1);
  c += elementwise_cost(s1);
  c += conv2_.cost(s1);
  c += bn2_.cost(s1);
  c += elementwise_cost(s1);
  c += conv3_.cost(s1);
  c += bn3_.cost(s3);
  return c;
}

VitStem::VitStem(std::string path, Index in_channels, Index out_channels)
    : Module(std::move(path)),
      in_(in_channels),
      out_(out_channels),
      conv_(Conv2dLayer::make(sub("proj"), in_channels, out_channels, 7, 4)),
      norm_{sub("norm"), out_channels, NormKind::Layer} {}

void VitStem::declare(std::vector<ParamSpec>& specs) const {
  conv_.declare(specs);
  norm_.declare(specs);
}

Shape VitStem::output_shape(const Shape& in) const {
  require_map(in, in_);
  return conv_.output_shape(in);
}

Var VitStem::forward(const Context& ctx, const Var& x) const {
  output_shape(x.shape());
  return norm_.forward(ctx, conv_.forward(ctx, x));
}

CostTally VitStem::cost(const Shape& in) const {
  CostTally c = conv_.cost(in);
  c += norm_.cost(output_shape(in));
  return c;
}

// ------------------------------------------------------------ HR block

HrBlock::HrBlock(std::string path, Index channels, Index expansion)
    : Module(std::move(path)),
      channels_(channels),
      expansion_(expansion),
      hi_dw_(Conv2dLayer::depthwise(sub("hi_dw"), channels, 3)),
      lo_dw_(no_bias(Conv2dLayer::depthwise(sub("lo_dw"), channels, 3, 2))),
      lo_norm_{sub("lo_norm"), channels, NormKind::Batch},
      fc1_(Conv2dLayer::make(sub("fc1"), channels, channels * expansion, 1)),
      fc2_(Conv2dLayer::make(sub("fc2"), channels * expansion, channels, 1)) {}

void HrBlock::declare(std::vector<ParamSpec>& specs) const {
  hi_dw_.declare(specs);
  lo_dw_.declare(specs);
  lo_norm_.declare(specs);
  fc1_.declare(specs);
  fc2_.declare(specs);
}

Shape HrBlock::output_shape(const Shape& in) const {
  require_map(in, channels_);
  if (in[2] % 2 != 0 || in[3] % 2 != 0) {
    throw ResolutionError(path() + " (hr_block): spatial extent " + std::to_string(in[2]) + "x" +
                          std::to_string(in[3]) + " must be even");
  }
  return in;
}

Var HrBlock::forward(const Context& ctx, const Var& x) const {
  output_shape(x.shape());
  const Var hi = hi_dw_.forward(ctx, x);
  Var lo = lo_norm_.forward(ctx, lo_dw_.forward(ctx, x));
  lo = fc2_.forward(ctx, gelu(fc1_.forward(ctx, lo)));
  return add(add(x, hi), upsample_repeat(lo, 2));
}

CostTally HrBlock::cost(const Shape& in) const {
  output_shape(in);
  const Shape low = lo_dw_.output_shape(in);
  const Shape wide = fc1_.output_shape(low);
  CostTally c = hi_dw_.cost(in);
  c += lo_dw_.cost(in);
  c += lo_norm_.cost(low);
  c += fc1_.cost(low);
  c += elementwise_cost(wide);
  c += fc2_.cost(wide);
  c += elementwise_cost(in);
  c += elementwise_cost(in);
  return c;
}

// ---------------------------------------------------------------- CFFN

CffnBlock::CffnBlock(std::string path, Index channels, Index expansion, NormKind norm, bool conv_branch)
    : Module(std::move(path)),
      channels_(channels),
      expansion_(expansion),
      conv_branch_(conv_branch),
      norm_{sub("norm"), channels, norm},
      fc1_(Conv2dLayer::make(sub("fc1"), channels, channels * expansion, 1)),
      dw_(Conv2dLayer::depthwise(sub("dw"), channels * expansion, 3)),
      fc2_(Conv2dLayer::make(sub("fc2"), channels * expansion, channels, 1)) {}

void CffnBlock::declare(std::vector<ParamSpec>& specs) const {
  norm_.declare(specs);
  fc1_.declare(specs);
  if (conv_branch_) dw_.declare(specs);
  fc2_.declare(specs);
}

Shape CffnBlock::output_shape(const Shape& in) const {
  require_map(in, channels_);
  return in;
}

Var CffnBlock::forward(const Context& ctx, const Var& x) const {
  output_shape(x.shape());
  Var z = gelu(fc1_.forward(ctx, norm_.forward(ctx, x)));
  if (conv_branch_) z = add(dw_.forward(ctx, z), z);
  return add(x, fc2_.forward(ctx, z));
}

Var CffnBlock::forward_tokens(const Context& ctx, const Var& tokens, Index height, Index width) const {
  return to_tokens(forward(ctx, to_spatial(tokens, height, width)));
}

CostTally CffnBlock::cost(const Shape& in) const {
  output_shape(in);
  const Shape wide = fc1_.output_shape(in);
  CostTally c = norm_.cost(in);
  c += fc1_.cost(in);
  c += elementwise_cost(wide);
  if (conv_branch_) {
    c += dw_.cost(wide);
    c += elementwise_cost(wide);
  }
  c += fc2_.cost(wide);
  c += elementwise_cost(in);
  return c;
}

// ----------------------------------------------------------- attention

MultiHeadAttention::MultiHeadAttention(std::string path, Index channels, Index heads, Index sr_ratio)
    : path_(std::move(path)),
      channels_(channels),
      heads_(heads),
      sr_(sr_ratio),
      q_{path_ + ".q", channels, channels},
      k_{path_ + ".k", channels, channels},
      v_{path_ + ".v", channels, channels},
      proj_{path_ + ".proj", channels, channels},
      sr_conv_{path_ + ".sr", channels, channels, sr_ratio, sr_ratio, 0, 1, true},
      sr_norm_{path_ + ".sr_norm", channels} {
  if (heads < 1 || channels % heads != 0) {
    throw ConfigError(path_ + ": " + std::to_string(channels) + " channels do not split into " +
                      std::to_string(heads) + " heads");
  }
  if (sr_ratio < 1) throw ConfigError(path_ + ": sr_ratio must be >= 1");
}

void MultiHeadAttention::declare(std::vector<ParamSpec>& specs) const {
  q_.declare(specs);
  if (sr_ > 1) {
    sr_conv_.declare(specs);
    sr_norm_.declare(specs);
  }
  k_.declare(specs);
  v_.declare(specs);
  proj_.declare(specs);
}

Index MultiHeadAttention::kv_tokens(Index height, Index width) const {
  if (sr_ == 1) return height * width;
  const Shape reduced = sr_conv_.output_shape({1, channels_, height, width});
  return reduced[2] * reduced[3];
}

Var MultiHeadAttention::forward(const Context& ctx, const Var& tokens, Index height, Index width) const {
  const Shape& ts = tokens.shape();
  if (ts.size() != 3 || ts[1] != height * width || ts[2] != channels_) {
    throw DimensionError(path_ + ": expected [N," + std::to_string(height * width) + "," +
                         std::to_string(channels_) + "] tokens, got " + shape_string(ts));
  }
  const Index n = ts[0], len = ts[1], dh = channels_ / heads_;

  Var kv = tokens;
  if (sr_ > 1) {
    kv = sr_norm_.forward(ctx, to_tokens(sr_conv_.forward(ctx, to_spatial(tokens, height, width))));
  }
  const Index kv_len = kv.dim(1);

  const Var q = permute(reshape(q_.forward(ctx, tokens), {n, len, heads_, dh}), {0, 2, 1, 3});
  const Var kt = permute(reshape(k_.forward(ctx, kv), {n, kv_len, heads_, dh}), {0, 2, 3, 1});
  const Var v = permute(reshape(v_.forward(ctx, kv), {n, kv_len, heads_, dh}), {0, 2, 1, 3});

  const Var scores = scale(matmul(q, kt), 1.0 / std::sqrt(static_cast<double>(dh)));
  const Var attn = softmax(scores, -1);
  const Var out = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {n, len, channels_});
  return proj_.forward(ctx, out);
}

CostTally MultiHeadAttention::cost(Index batch, Index height, Index width) const {
  const Index len = height * width;
  const Index kv_len = kv_tokens(height, width);
  const Shape tokens{batch, len, channels_};
  const Shape kv{batch, kv_len, channels_};
  CostTally c = q_.cost(tokens);
  if (sr_ > 1) {
    c += sr_conv_.cost({batch, channels_, height, width});
    c += sr_norm_.cost(kv);
  }
  c += k_.cost(kv);
  c += v_.cost(kv);
  const auto products = static_cast<std::uint64_t>(batch * len * kv_len);
  const auto score_count = products * static_cast<std::uint64_t>(heads_);
  c.macs += products * static_cast<std::uint64_t>(channels_);  // Q K^T
  c.elementwise += 2 * score_count;                            // scale, softmax
  c.macs += products * static_cast<std::uint64_t>(channels_);  // A V
  c += proj_.cost(tokens);
  return c;
}

TransformerBlock::TransformerBlock(std::string path, Index channels, Index heads, Index sr_ratio, Index expansion,
                                   NormKind ffn_norm, bool conv_ffn)
    : Module(std::move(path)),
      channels_(channels),
      norm_{sub("norm"), channels},
      attn_(sub("attn"), channels, heads, sr_ratio),
      ffn_(sub("ffn"), channels, expansion, ffn_norm, conv_ffn) {}

void TransformerBlock::declare(std::vector<ParamSpec>& specs) const {
  norm_.declare(specs);
  attn_.declare(specs);
  ffn_.declare(specs);
}

Shape TransformerBlock::output_shape(const Shape& in) const {
  require_map(in, channels_);
  attn_.kv_tokens(in[2], in[3]);
  return in;
}

Var TransformerBlock::forward(const Context& ctx, const Var& x) const {
  output_shape(x.shape());
  const Index h = x.dim(2), w = x.dim(3);
  const Var t = to_tokens(x);
  const Var mixed = add(t, attn_.forward(ctx, norm_.forward(ctx, t), h, w));
  return ffn_.forward(ctx, to_spatial(mixed, h, w));
}

CostTally TransformerBlock::cost(const Shape& in) const {
  output_shape(in);
  const Shape tokens{in[0], in[2] * in[3], in[1]};
  CostTally c = norm_.cost(tokens);
  c += attn_.cost(in[0], in[2], in[3]);
  c += elementwise_cost(tokens);
  c += ffn_.cost(in);
  return c;
}

// ------------------------------------------------------ downsamplers

Var DownsampleShortcut::forward(const Context& ctx, const Var& x) const {
  return conv.forward(ctx, avg_pool2x2(x));
}

CostTally DownsampleShortcut::cost(const Shape& in) const {
  const Shape pooled{in[0], in[1], (in[2] + 1) / 2, (in[3] + 1) / 2};
  CostTally c = elementwise_cost(pooled);
  c += conv.cost(pooled);
  return c;
}

IrdsA::IrdsA(std::string path, Index in_channels, Index out_channels, Index expansion)
    : Module(std::move(path)),
      in_(in_channels),
      out_(out_channels),
      hidden_(out_channels * expansion),
      conv1_(no_bias(Conv2dLayer::make(sub("conv1"), in_, hidden_, 3, 2))),
      conv2_(no_bias(Conv2dLayer::make(sub("conv2"), hidden_, out_, 1))),
      bn1_{sub("bn1"), hidden_, NormKind::Batch},
      bn2_{sub("bn2"), out_, NormKind::Batch},
      shortcut_{Conv2dLayer::make(sub("shortcut"), in_, out_, 1)} {}

void IrdsA::declare(std::vector<ParamSpec>& specs) const {
  conv1_.declare(specs);
  bn1_.declare(specs);
  conv2_.declare(specs);
  bn2_.declare(specs);
  shortcut_.declare(specs);
}

Shape IrdsA::output_shape(const Shape& in) const {
  require_map(in, in_);
  return conv2_.output_shape(conv1_.output_shape(in));
}

Var IrdsA::forward(const Context& ctx, const Var& x) const {
  output_shape(x.shape());
  Var y = gelu(bn1_.forward(ctx, conv1_.forward(ctx, x)));
  y = bn2_.forward(ctx, conv2_.forward(ctx, y));
  return add(y, shortcut_.forward(ctx, x));
}

CostTally IrdsA::cost(const Shape& in) const {
  const Shape mid = conv1_.output_shape(in);
  const Shape out = output_shape(in);
  CostTally c = conv1_.cost(in);
  c += bn1_.cost(mid);
  c += elementwise_cost(mid);
  c += conv2_.cost(mid);
  c += bn2_.cost(out);
  c += shortcut_.cost(in);
  c += elementwise_cost(out);
  return c;
}

IrdsB::IrdsB(std::string path, Index in_channels, Index out_channels, Index expansion)
    : Module(std::move(path)),
      in_(in_channels),
      out_(out_channels),
      hidden_(in_channels * expansion),
      expand_(no_bias(Conv2dLayer::make(sub("expand"), in_, hidden_, 1))),
      dw_(Conv2dLayer::depthwise(sub("dw"), hidden_, 3, 2)),
      project_(Conv2dLayer::make(sub("project"), hidden_, out_, 1)),
      bn_{sub("bn"), hidden_, NormKind::Batch},
      shortcut_{Conv2dLayer::make(sub("shortcut"), in_, out_, 1)} {}

void IrdsB::declare(std::vector<ParamSpec>& specs) const {
  expand_.declare(specs);
  bn_.declare(specs);
  dw_.declare(specs);
  project_.declare(specs);
  shortcut_.declare(specs);
}

Shape IrdsB::output_shape(const Shape& in) const {
  require_map(in, in_);
  return project_.output_shape(dw_.output_shape(expand_.output_shape(in)));
}

Var IrdsB::forward(const Context& ctx, const Var& x) const {
  output_shape(x.shape());
  Var y = gelu(bn_.forward(ctx, expand_.forward(ctx, x)));
  y = project_.forward(ctx, dw_.forward(ctx, y));
  return add(y, shortcut_.forward(ctx, x));
}

CostTally IrdsB::cost(const Shape& in) const {
  const Shape wide = expand_.output_shape(in);
  const Shape low = dw_.output_shape(wide);
  const Shape out = output_shape(in);
  CostTally c = expand_.cost(in);
  c += bn_.cost(wide);
  c += elementwise_cost(wide);
  c += dw_.cost(wide);
  c += project_.cost(low);
  c += shortcut_.cost(in);
  c += elementwise_cost(out);
  return c;
}

PlainDownsample::PlainDownsample(std::string path, Index in_channels, Index out_channels, NormKind norm)
    : Module(std::move(path)),
      in_(in_channels),
      out_(out_channels),
      conv_(Conv2dLayer::make(sub("conv"), in_channels, out_channels, 3, 2)),
      norm_{sub("norm"), out_channels, norm} {
  if (norm == NormKind::Batch) conv_.bias = false;
}

void PlainDownsample::declare(std::vector<ParamSpec>& specs) const {
  conv_.declare(specs);
  norm_.declare(specs);
}

Shape PlainDownsample::output_shape(const Shape& in) const {
  require_map(in, in_);
  return conv_.output_shape(in);
}

Var PlainDownsample::forward(const Context& ctx, const Var& x) const {
  output_shape(x.shape());
  return norm_.forward(ctx, conv_.forward(ctx, x));
}

CostTally PlainDownsample::cost(const Shape& in) const {
  CostTally c = conv_.cost(in);
  c += norm_.cost(output_shape(in));
  return c;
}

// ---------------------------------------------------------- classifier

Classifier::Classifier(std::string path, Index channels, Index classes)
    : Module(std::move(path)), channels_(channels), classes_(classes), fc_{sub("fc"), channels, classes} {}

void Classifier::declare(std::vector<ParamSpec>& specs) const { fc_.declare(specs); }

Shape Classifier::output_shape(const Shape& in) const {
  require_map(in, channels_);
  return {in[0], classes_};
}

Var Classifier::forward(const Context& ctx, const Var& x) const {
  output_shape(x.shape());
  return fc_.forward(ctx, global_avg_pool(x));
}

Var Classifier::position_logits(const Context& ctx, const Var& x) const {
  output_shape(x.shape());
  return to_spatial(fc_.forward(ctx, to_tokens(x)), x.dim(2), x.dim(3));
}

CostTally Classifier::cost(const Shape& in) const {
  const Shape pooled = {in[0], channels_};
  CostTally c = elementwise_cost(pooled);
  c += fc_.cost(pooled);
  return c;
}

}  // namespace hiri
