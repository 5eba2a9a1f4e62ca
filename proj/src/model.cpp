#include "hiri/model.hpp"

#include <array>

namespace hiri {

const char* to_string(Family v) { return v == Family::Hiri ? "hiri" : "mvit"; }

const char* to_string(BlockKind v) {
  switch (v) {
    case BlockKind::Hr: return "hr";
    case BlockKind::Cffn: return "cffn";
    case BlockKind::Transformer: return "transformer";
  }
  return "?";
}

const char* to_string(StemKind v) {
  switch (v) {
    case StemKind::Hr: return "hr";
    case StemKind::Conv: return "conv";
    case StemKind::Vit: return "vit";
  }
  return "?";
}

const char* to_string(DownsampleKind v) {
  switch (v) {
    case DownsampleKind::IrdsA: return "irds_a";
    case DownsampleKind::IrdsB: return "irds_b";
    case DownsampleKind::Plain: return "plain";
  }
  return "?";
}

const char* to_string(Variant v) {
  switch (v) {
    case Variant::S: return "S";
    case Variant::B: return "B";
    case Variant::L: return "L";
    case Variant::Micro: return "micro";
  }
  return "?";
}

Variant parse_variant(const std::string& text) {
  if (text == "S" || text == "s") return Variant::S;
  if (text == "B" || text == "b") return Variant::B;
  if (text == "L" || text == "l") return Variant::L;
  if (text == "micro") return Variant::Micro;
  throw ConfigError("unknown variant '" + text + "' (expected S, B, L or micro)");
}

// ------------------------------------------------------------- config

namespace {

// Empty when every attention stage map is at least as wide as its reduction kernel.
std::string reduction_problem(const ModelConfig& c, Index extent) {
  for (std::size_t i = 0; i < c.stages.size(); ++i) {
    const StageSpec& s = c.stages[i];
    const Index side = (extent + s.resolution_divisor - 1) / s.resolution_divisor;
    if (s.kind == BlockKind::Transformer && side < s.sr_ratio) {
      return c.name + ": input side " + std::to_string(extent) + " gives a " + std::to_string(side) +
             "-wide map in stage " + std::to_string(i + 1) + ", smaller than its reduction ratio " +
             std::to_string(s.sr_ratio);
    }
  }
  return {};
}

}  // namespace

void ModelConfig::validate_resolution(Index res) const {
  if (res < kResolutionMultiple || res % kResolutionMultiple != 0) {
    throw ConfigError(name + ": resolution " + std::to_string(res) + " is not a positive multiple of " +
                      std::to_string(kResolutionMultiple));
  }
  if (const std::string problem = reduction_problem(*this, res); !problem.empty()) throw ConfigError(problem);
}

void ModelConfig::validate() const {
  const std::string who = name.empty() ? std::string("config") : name;
  const std::size_t want = family == Family::Hiri ? 5 : 4;
  if (stages.size() != want) {
    throw ConfigError(who + ": " + to_string(family) + " family needs " + std::to_string(want) + " stages, got " +
                      std::to_string(stages.size()));
  }
  if (downsamplers.size() + 1 != stages.size()) {
    throw ConfigError(who + ": need " + std::to_string(stages.size() - 1) + " downsamplers, got " +
                      std::to_string(downsamplers.size()));
  }
  validate_resolution(resolution);
  if (num_classes < 1) throw ConfigError(who + ": num_classes must be >= 1");
  if (stem_width < 1) throw ConfigError(who + ": stem_width must be >= 1");
  if (irds_a_expansion < 1 || irds_b_expansion < 1) throw ConfigError(who + ": IRDS expansions must be >= 1");

  for (std::size_t i = 0; i < stages.size(); ++i) {
    const StageSpec& s = stages[i];
    const std::string where = who + " stage " + std::to_string(i + 1) + ": ";
    if (s.depth < 1) throw ConfigError(where + "depth must be >= 1");
    if (s.channels < 1) throw ConfigError(where + "channels must be >= 1");
    if (s.expansion < 1) throw ConfigError(where + "expansion must be >= 1");
    if (s.sr_ratio < 1) throw ConfigError(where + "sr_ratio must be >= 1");
    const bool attention = s.kind == BlockKind::Transformer;
    if (attention != s.heads.has_value()) {
      throw ConfigError(where + (attention ? "transformer stage needs heads" : "heads given for a stage without attention"));
    }
    if (attention && (*s.heads < 1 || s.channels % *s.heads != 0)) {
      throw ConfigError(where + std::to_string(s.channels) + " channels not divisible by " + std::to_string(*s.heads) +
                        " heads");
    }
    const Index divisor = Index{4} << i;
    if (s.resolution_divisor != divisor) {
      throw ConfigError(where + "resolution divisor must be " + std::to_string(divisor) + ", got " +
                        std::to_string(s.resolution_divisor));
    }
  }
}

namespace {

StageSpec stage(BlockKind kind, Index depth, Index channels, Index expansion, std::size_t index,
                std::optional<Index> heads = std::nullopt, Index sr = 1) {
  StageSpec s;
  s.kind = kind;
  s.depth = depth;
  s.channels = channels;
  s.expansion = expansion;
  s.heads = heads;
  s.sr_ratio = sr;
  s.resolution_divisor = Index{4} << index;
  return s;
}

struct VariantRow {
  Index channels, expansion, depth, heads;
};

}  // namespace

ModelConfig hiri_vit_config(Variant variant, Index resolution, Index num_classes) {
  // channels, expansion, depth, heads (0 for stages without attention)
  static const std::array<VariantRow, 5> kS{{{32, 4, 2, 0}, {64, 4, 2, 0}, {128, 6, 2, 0}, {320, 5, 9, 5}, {512, 5, 4, 8}}};
  static const std::array<VariantRow, 5> kB{
      {{64, 4, 2, 0}, {96, 4, 2, 0}, {192, 5, 3, 0}, {320, 4, 17, 5}, {640, 5, 4, 10}}};
  static const std::array<VariantRow, 5> kL{
      {{80, 4, 4, 0}, {160, 4, 4, 0}, {224, 5, 5, 0}, {448, 3, 25, 7}, {640, 5, 5, 10}}};
  static const std::array<VariantRow, 5> kMicro{{{8, 2, 1, 0}, {16, 2, 1, 0}, {24, 2, 1, 0}, {32, 2, 1, 2}, {40, 2, 1, 2}}};

  const auto& rows = variant == Variant::S ? kS : variant == Variant::B ? kB : variant == Variant::L ? kL : kMicro;
  ModelConfig c;
  c.name = variant == Variant::Micro ? "HIRI-ViT-micro" : std::string("HIRI-ViT-") + to_string(variant);
  c.family = Family::Hiri;
  c.resolution = resolution;
  c.num_classes = num_classes;
  c.stem = StemKind::Hr;
  c.stem_width = rows[0].channels;
  c.downsamplers = {DownsampleKind::IrdsA, DownsampleKind::IrdsA, DownsampleKind::IrdsB, DownsampleKind::IrdsB};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const VariantRow& r = rows[i];
    if (i < 2) {
      c.stages.push_back(stage(BlockKind::Hr, r.depth, r.channels, r.expansion, i));
    } else if (i == 2) {
      c.stages.push_back(stage(BlockKind::Cffn, r.depth, r.channels, r.expansion, i));
    } else {
      c.stages.push_back(stage(BlockKind::Transformer, r.depth, r.channels, r.expansion, i, r.heads, i == 3 ? 2 : 1));
    }
  }
  return c;
}

ModelConfig mvit_row_config(int row, Index num_classes) {
  if (row < 1 || row > 7) throw ConfigError("baseline row must be in 1..7, got " + std::to_string(row));
  static constexpr std::array<Index, 4> kWidths{64, 128, 320, 512};
  static constexpr std::array<Index, 4> kDepths{2, 2, 9, 5};
  static constexpr std::array<Index, 4> kHeads{1, 2, 5, 8};
  static constexpr std::array<Index, 4> kSr{8, 4, 1, 1};
  static constexpr std::array<Index, 4> kExpansion{4, 4, 5, 5};
  static constexpr std::array<Index, 4> kExpansionNoAttention{8, 6, 5, 5};

  ModelConfig c;
  c.name = "M-ViT row " + std::to_string(row);
  c.family = Family::Mvit;
  c.resolution = row == 7 ? 448 : 224;
  c.num_classes = num_classes;
  c.stem = row >= 5 ? StemKind::Conv : StemKind::Vit;
  c.stem_width = row >= 5 ? 32 : kWidths[0];
  if (row >= 6) {
    c.downsamplers = {DownsampleKind::IrdsA, DownsampleKind::IrdsB, DownsampleKind::IrdsB};
  } else {
    c.downsamplers.assign(3, DownsampleKind::Plain);
  }
  for (std::size_t i = 0; i < 4; ++i) {
    const bool attention = !(row >= 3 && i < 2);
    StageSpec s = attention ? stage(BlockKind::Transformer, kDepths[i], kWidths[i], kExpansion[i], i, kHeads[i], kSr[i])
                            : stage(BlockKind::Cffn, kDepths[i], kWidths[i], kExpansionNoAttention[i], i);
    s.conv_ffn = row >= 2;
    s.ffn_norm = row >= 4 ? NormKind::Batch : NormKind::Layer;
    c.stages.push_back(s);
  }
  return c;
}

// -------------------------------------------------------------- model

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& st = config_.stages;
  const Index c1 = st.front().channels;
  switch (config_.stem) {
    case StemKind::Hr:
      modules_.push_back(std::make_shared<HrStem>("stem", 3, config_.stem_width, c1));
      break;
    case StemKind::Conv:
      modules_.push_back(std::make_shared<ConvStem>("stem", 3, config_.stem_width, c1));
      break;
    case StemKind::Vit:
      modules_.push_back(std::make_shared<VitStem>("stem", 3, c1));
      break;
  }
  stage_of_.push_back(-1);

  for (std::size_t i = 0; i < st.size(); ++i) {
    const StageSpec& s = st[i];
    const int stage_index = static_cast<int>(i);
    if (i > 0) {
      const std::string path = "down" + std::to_string(i + 1);
      const Index cin = st[i - 1].channels;
      switch (config_.downsamplers[i - 1]) {
        case DownsampleKind::IrdsA:
          modules_.push_back(std::make_shared<IrdsA>(path, cin, s.channels, config_.irds_a_expansion));
          break;
        case DownsampleKind::IrdsB:
          modules_.push_back(std::make_shared<IrdsB>(path, cin, s.channels, config_.irds_b_expansion));
          break;
        case DownsampleKind::Plain:
          modules_.push_back(std::make_shared<PlainDownsample>(path, cin, s.channels));
          break;
      }
      stage_of_.push_back(stage_index);
    }
    for (Index b = 0; b < s.depth; ++b) {
      const std::string path = "stage" + std::to_string(i + 1) + "." + std::to_string(b);
      switch (s.kind) {
        case BlockKind::Hr:
          modules_.push_back(std::make_shared<HrBlock>(path, s.channels, s.expansion));
          break;
        case BlockKind::Cffn:
          modules_.push_back(std::make_shared<CffnBlock>(path, s.channels, s.expansion, s.ffn_norm, s.conv_ffn));
          break;
        case BlockKind::Transformer:
          modules_.push_back(std::make_shared<TransformerBlock>(path, s.channels, *s.heads, s.sr_ratio, s.expansion,
                                                                s.ffn_norm, s.conv_ffn));
          break;
      }
      stage_of_.push_back(stage_index);
    }
  }
  head_ = std::make_shared<Classifier>("head", st.back().channels, config_.num_classes);
  modules_.push_back(head_);
  stage_of_.push_back(-1);
}

std::vector<ParamSpec> Model::param_specs() const {
  std::vector<ParamSpec> specs;
  for (const auto& m : modules_) m->declare(specs);
  return specs;
}

Index Model::param_count() const {
  Index total = 0;
  for (const auto& m : modules_) total += m->param_count();
  return total;
}

ParamTree Model::init_params(std::uint64_t seed) const {
  Rng rng(seed);
  return make_params(param_specs(), rng);
}

void Model::check_input(const Shape& images) const {
  if (images.size() != 4 || images[1] != 3) {
    throw DimensionError(config_.name + ": expected images [N,3,H,W], got " + shape_string(images));
  }
  for (int axis : {2, 3}) {
    const Index extent = images[axis];
    if (extent < kResolutionMultiple || extent % kResolutionMultiple != 0) {
      throw ResolutionError(config_.name + ": input side " + std::to_string(extent) + " is not a positive multiple of " +
                            std::to_string(kResolutionMultiple));
    }
    if (const std::string problem = reduction_problem(config_, extent); !problem.empty()) {
      throw ResolutionError(problem);
    }
  }
}

Var Model::features(const Context& ctx, const Var& images) const {
  check_input(images.shape());
  Var x = images;
  for (std::size_t i = 0; i + 1 < modules_.size(); ++i) x = modules_[i]->forward(ctx, x);
  return x;
}

Var Model::forward(const Context& ctx, const Var& images) const { return head_->forward(ctx, features(ctx, images)); }

Var Model::position_logits(const Context& ctx, const Var& images) const {
  return head_->position_logits(ctx, features(ctx, images));
}

std::vector<Shape> Model::stage_shapes(const Shape& images) const {
  check_input(images);
  std::vector<Shape> out(config_.stages.size());
  Shape s = images;
  for (std::size_t i = 0; i + 1 < modules_.size(); ++i) {
    s = modules_[i]->output_shape(s);
    if (stage_of_[i] >= 0) out[static_cast<std::size_t>(stage_of_[i])] = s;
  }
  return out;
}

BuiltModel build_model(const ModelConfig& config, std::uint64_t seed) {
  Model model(config);
  ParamTree params = model.init_params(seed);
  return {std::move(model), std::move(params)};
}

BuiltModel build_hiri_vit(Variant variant, Index resolution, Index num_classes, std::uint64_t seed) {
  return build_model(hiri_vit_config(variant, resolution, num_classes), seed);
}

BuiltModel build_mvit_baseline(const ModelConfig& config, std::uint64_t seed) {
  if (config.family != Family::Mvit) throw ConfigError(config.name + ": not a four-stage baseline config");
  return build_model(config, seed);
}

}  // namespace hiri
