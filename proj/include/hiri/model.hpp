#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hiri/blocks.hpp"

namespace hiri {

enum class Family { Hiri, Mvit };
enum class BlockKind { Hr, Cffn, Transformer };
enum class StemKind { Hr, Conv, Vit };
enum class DownsampleKind { IrdsA, IrdsB, Plain };
enum class Variant { S, B, L, Micro };

const char* to_string(Family v);
const char* to_string(BlockKind v);
const char* to_string(StemKind v);
const char* to_string(DownsampleKind v);
const char* to_string(Variant v);

Variant parse_variant(const std::string& text);

struct StageSpec {
  BlockKind kind = BlockKind::Hr;
  Index depth = 1;
  Index channels = 0;
  Index expansion = 4;
  std::optional<Index> heads;  // transformer stages only
  Index sr_ratio = 1;
  bool conv_ffn = true;
  NormKind ffn_norm = NormKind::Batch;
  Index resolution_divisor = 0;

  bool operator==(const StageSpec&) const = default;
};

struct ModelConfig {
  std::string name;
  Family family = Family::Hiri;
  Index resolution = 224;
  Index num_classes = 1000;
  StemKind stem = StemKind::Hr;
  Index stem_width = 0;
  std::vector<DownsampleKind> downsamplers;
  Index irds_a_expansion = 2;
  Index irds_b_expansion = 4;
  std::vector<StageSpec> stages;

  /// Throws ConfigError describing the first violated invariant.
  void validate() const;
  /// Throws ConfigError unless `resolution` is usable for this layout.
  void validate_resolution(Index resolution) const;

  bool operator==(const ModelConfig&) const = default;
};

/// Input side lengths must be multiples of this.
inline constexpr Index kResolutionMultiple = 32;

ModelConfig hiri_vit_config(Variant variant, Index resolution = 224, Index num_classes = 1000);
/// Four-stage baseline ladder: row 1 is the plain multi-stage ViT, each later
/// row adds one design change; row 7 is row 6 at 448.
ModelConfig mvit_row_config(int row, Index num_classes = 1000);

class Model {
 public:
  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  /// Stem, per-stage downsampler and blocks, then the classifier.
  const std::vector<ModulePtr>& modules() const { return modules_; }
  /// Stage index (0-based) of each module; -1 for stem and classifier.
  const std::vector<int>& module_stages() const { return stage_of_; }
  const Classifier& head() const { return *head_; }

  std::vector<ParamSpec> param_specs() const;
  Index param_count() const;
  ParamTree init_params(std::uint64_t seed) const;

  /// Throws ResolutionError/DimensionError for unusable image batches.
  void check_input(const Shape& images) const;
  /// Final feature map [N, C_last, h, w].
  Var features(const Context& ctx, const Var& images) const;
  Var forward(const Context& ctx, const Var& images) const;
  /// Classifier applied at every position of the final map: [N, K, h, w].
  Var position_logits(const Context& ctx, const Var& images) const;

  /// Output shape of each stage for an input of this shape.
  std::vector<Shape> stage_shapes(const Shape& images) const;

 private:
  ModelConfig config_;
  std::vector<ModulePtr> modules_;
  std::vector<int> stage_of_;
  std::shared_ptr<const Classifier> head_;
};

struct BuiltModel {
  Model model;
  ParamTree params;
};

BuiltModel build_model(const ModelConfig& config, std::uint64_t seed);
BuiltModel build_hiri_vit(Variant variant, Index resolution, Index num_classes, std::uint64_t seed);
BuiltModel build_mvit_baseline(const ModelConfig& config, std::uint64_t seed);

}  // namespace hiri
