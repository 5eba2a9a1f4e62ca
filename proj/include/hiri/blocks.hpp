#pragma once

// Composite blocks. A block holds hyperparameters and its path prefix;
// tensors live in a ParamTree and are looked up by path at forward time.

#include <memory>
#include <string>
#include <vector>

#include "hiri/layers.hpp"

namespace hiri {

class Module {
 public:
  explicit Module(std::string path) : path_(std::move(path)) {}
  virtual ~Module() = default;

  const std::string& path() const { return path_; }
  virtual std::string kind() const = 0;

  virtual void declare(std::vector<ParamSpec>& specs) const = 0;
  virtual Var forward(const Context& ctx, const Var& x) const = 0;
  /// Throws ResolutionError/DimensionError for inputs the block cannot take.
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual CostTally cost(const Shape& in) const = 0;

  std::vector<ParamSpec> param_specs() const;
  Index param_count() const;
  ParamTree init_params(Rng& rng) const { return make_params(param_specs(), rng); }

 protected:
  std::string sub(const std::string& name) const { return path_ + "." + name; }
  /// Throws DimensionError unless `in` is [N, channels, H, W].
  void require_map(const Shape& in, Index channels) const;

 private:
  std::string path_;
};

using ModulePtr = std::shared_ptr<const Module>;

/// conv3x3 s2 -> BN -> GELU, then a high-resolution branch (DW3x3, conv3x3 s2)
/// and a low-resolution branch (conv3x3 s2, conv3x3, conv1x1) summed and batch-normalized.
class HrStem final : public Module {
 public:
  HrStem(std::string path, Index in_channels, Index mid_channels, Index out_channels);
  std::string kind() const override { return "hr_stem"; }
  void declare(std::vector<ParamSpec>& specs) const override;
  Var forward(const Context& ctx, const Var& x) const override;
  Shape output_shape(const Shape& in) const override;
  CostTally cost(const Shape& in) const override;

 private:
  Index in_, mid_, out_;
  Conv2dLayer conv0_;
  Norm2d bn0_;
  Conv2dLayer hi_dw_, hi_conv_;
  Conv2dLayer lo_conv1_, lo_conv2_, lo_conv3_;
  Norm2d bn_out_;
};

/// Three 3x3 convs (s2, s1, s2) with BN; GELU after the first two.
class ConvStem final : public Module {
 public:
  ConvStem(std::string path, Index in_channels, Index mid_channels, Index out_channels);
  std::string kind() const override { return "conv_stem"; }
  void declare(std::vector<ParamSpec>& specs) const override;
  Var forward(const Context& ctx, const Var& x) const override;
  Shape output_shape(const Shape& in) const override;
  CostTally cost(const Shape& in) const override;

 private:
  Index in_, out_;
  Conv2dLayer conv1_, conv2_, conv3_;
  Norm2d bn1_, bn2_, bn3_;
};

/// 7x7 stride-4 patch embedding followed by channel LayerNorm.
class VitStem final : public Module {
 public:
  VitStem(std::string path, Index in_channels, Index out_channels);
  std::string kind() const override { return "vit_stem"; }
  void declare(std::vector<ParamSpec>& specs) const override;
  Var forward(const Context& ctx, const Var& x) const override;
  Shape output_shape(const Shape& in) const override;
  CostTally cost(const Shape& in) const override;

 private:
  Index in_, out_;
  Conv2dLayer conv_;
  Norm2d norm_;
};

/// x + DW3x3(x) + Up(FC2(GELU(FC1(BN(DW3x3_s2(x)))))). Needs even H and W.
class HrBlock final : public Module {
 public:
  HrBlock(std::string path, Index channels, Index expansion);
  std::string kind() const override { return "hr_block"; }
  void declare(std::vector<ParamSpec>& specs) const override;
  Var forward(const Context& ctx, const Var& x) const override;
  Shape output_shape(const Shape& in) const override;
  CostTally cost(const Shape& in) const override;

 private:
  Index channels_, expansion_;
  Conv2dLayer hi_dw_, lo_dw_;
  Norm2d lo_norm_;
  Conv2dLayer fc1_, fc2_;
};

/// x + FC2(DW3x3(z) + z), z = GELU(FC1(norm(x))). Without the conv branch
/// it is the plain x + FC2(GELU(FC1(norm(x)))).
class CffnBlock final : public Module {
 public:
  CffnBlock(std::string path, Index channels, Index expansion, NormKind norm = NormKind::Batch,
            bool conv_branch = true);
  std::string kind() const override { return conv_branch_ ? "cffn" : "ffn"; }
  void declare(std::vector<ParamSpec>& specs) const override;
  Var forward(const Context& ctx, const Var& x) const override;
  Shape output_shape(const Shape& in) const override;
  CostTally cost(const Shape& in) const override;

  /// Token form: [N, H*W, C] in and out.
  Var forward_tokens(const Context& ctx, const Var& tokens, Index height, Index width) const;

 private:
  Index channels_, expansion_;
  bool conv_branch_;
  Norm2d norm_;
  Conv2dLayer fc1_, dw_, fc2_;
};

/// Multi-head self-attention over [N, n, C] tokens with optional spatial
/// reduction of keys and values by a kernel = stride = sr convolution.
class MultiHeadAttention {
 public:
  MultiHeadAttention(std::string path, Index channels, Index heads, Index sr_ratio);

  void declare(std::vector<ParamSpec>& specs) const;
  Var forward(const Context& ctx, const Var& tokens, Index height, Index width) const;
  /// Number of key/value tokens for a height x width query grid.
  Index kv_tokens(Index height, Index width) const;
  CostTally cost(Index batch, Index height, Index width) const;

  Index channels() const { return channels_; }
  Index heads() const { return heads_; }
  Index sr_ratio() const { return sr_; }

 private:
  std::string path_;
  Index channels_, heads_, sr_;
  LinearLayer q_, k_, v_, proj_;
  Conv2dLayer sr_conv_;
  TokenLayerNorm sr_norm_;
};

/// x + MHA(LN(x)) followed by a (C)FFN block.
class TransformerBlock final : public Module {
 public:
  TransformerBlock(std::string path, Index channels, Index heads, Index sr_ratio, Index expansion,
                   NormKind ffn_norm = NormKind::Batch, bool conv_ffn = true);
  std::string kind() const override { return "transformer"; }
  void declare(std::vector<ParamSpec>& specs) const override;
  Var forward(const Context& ctx, const Var& x) const override;
  Shape output_shape(const Shape& in) const override;
  CostTally cost(const Shape& in) const override;

  const MultiHeadAttention& attention() const { return attn_; }

 private:
  Index channels_;
  TokenLayerNorm norm_;
  MultiHeadAttention attn_;
  CffnBlock ffn_;
};

/// Shortcut shared by both inverted-residual downsamplers: 2x2 average pool
/// (ceil mode) then conv1x1.
struct DownsampleShortcut {
  Conv2dLayer conv;
  void declare(std::vector<ParamSpec>& specs) const { conv.declare(specs); }
  Var forward(const Context& ctx, const Var& x) const;
  CostTally cost(const Shape& in) const;
};

/// conv3x3 s2 (Cin -> X) -> BN -> GELU -> conv1x1 (X -> Cout) -> BN, plus shortcut.
class IrdsA final : public Module {
 public:
  IrdsA(std::string path, Index in_channels, Index out_channels, Index expansion);
  std::string kind() const override { return "irds_a"; }
  void declare(std::vector<ParamSpec>& specs) const override;
  Var forward(const Context& ctx, const Var& x) const override;
  Shape output_shape(const Shape& in) const override;
  CostTally cost(const Shape& in) const override;

 private:
  Index in_, out_, hidden_;
  Conv2dLayer conv1_, conv2_;
  Norm2d bn1_, bn2_;
  DownsampleShortcut shortcut_;
};

/// conv1x1 (Cin -> X) -> BN -> GELU -> DW3x3 s2 -> conv1x1 (X -> Cout), plus shortcut.
class IrdsB final : public Module {
 public:
  IrdsB(std::string path, Index in_channels, Index out_channels, Index expansion);
  std::string kind() const override { return "irds_b"; }
  void declare(std::vector<ParamSpec>& specs) const override;
  Var forward(const Context& ctx, const Var& x) const override;
  Shape output_shape(const Shape& in) const override;
  CostTally cost(const Shape& in) const override;

 private:
  Index in_, out_, hidden_;
  Conv2dLayer expand_, dw_, project_;
  Norm2d bn_;
  DownsampleShortcut shortcut_;
};

/// conv3x3 s2 followed by a channel norm.
class PlainDownsample final : public Module {
 public:
  PlainDownsample(std::string path, Index in_channels, Index out_channels, NormKind norm = NormKind::Layer);
  std::string kind() const override { return "plain_down"; }
  void declare(std::vector<ParamSpec>& specs) const override;
  Var forward(const Context& ctx, const Var& x) const override;
  Shape output_shape(const Shape& in) const override;
  CostTally cost(const Shape& in) const override;

 private:
  Index in_, out_;
  Conv2dLayer conv_;
  Norm2d norm_;
};

/// Global average pool then a linear layer: [N,C,H,W] -> [N,K].
class Classifier final : public Module {
 public:
  Classifier(std::string path, Index channels, Index classes);
  std::string kind() const override { return "classifier"; }
  void declare(std::vector<ParamSpec>& specs) const override;
  Var forward(const Context& ctx, const Var& x) const override;
  Shape output_shape(const Shape& in) const override;
  CostTally cost(const Shape& in) const override;

  /// The linear layer applied at every position: [N,C,H,W] -> [N,K,H,W].
  Var position_logits(const Context& ctx, const Var& x) const;
  Index classes() const { return classes_; }

 private:
  Index channels_, classes_;
  LinearLayer fc_;
};

}  // namespace hiri
