#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "hiri/serialize.hpp"
#include "support.hpp"

using namespace hiri;
using hiri::test::randn;

namespace fs = std::filesystem;

namespace {

Array logits(const BuiltModel& built, ParamTree& params, const Array& images) {
  Tape tape(false);
  const Context ctx{tape, params, Mode::Eval};
  return built.model.forward(ctx, tape.constant(images)).value();
}

void train_forward(const Model& model, ParamTree& params, const Array& images) {
  Tape tape(false);
  const Context ctx{tape, params, Mode::Train};
  model.forward(ctx, tape.constant(images));
}

Array batch_slice(const Array& a, Index begin, Index count) {
  Shape shape = a.shape();
  const Index per = a.size() / shape[0];
  shape[0] = count;
  Array out(shape);
  std::copy_n(a.data() + begin * per, count * per, out.data());
  return out;
}

double within(double measured, double expected) { return std::abs(measured - expected) / expected; }

// Bitwise CRC-32 (reflected, polynomial 0xEDB88320).
std::uint32_t crc32_bitwise(const std::string& bytes) {
  std::uint32_t crc = 0xFFFFFFFFu;
  for (unsigned char b : bytes) {
    crc ^= b;
    for (int k = 0; k < 8; ++k) crc = (crc >> 1) ^ (0xEDB88320u & (0u - (crc & 1u)));
  }
  return ~crc;
}

template <typename T>
void le(std::string& s, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) s.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "hiri_test_model_zoo";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary);
  f << bytes;
}

}  // namespace

TEST_SUITE("variants") {
  TEST_CASE("S stage table") {
    const ModelConfig c = hiri_vit_config(Variant::S);
    REQUIRE(c.stages.size() == 5);
    const std::vector<Index> widths{32, 64, 128, 320, 512}, depths{2, 2, 2, 9, 4}, exps{4, 4, 6, 5, 5};
    const std::vector<BlockKind> kinds{BlockKind::Hr, BlockKind::Hr, BlockKind::Cffn, BlockKind::Transformer,
                                       BlockKind::Transformer};
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(c.stages[i].channels == widths[i]);
      CHECK(c.stages[i].depth == depths[i]);
      CHECK(c.stages[i].expansion == exps[i]);
      CHECK(c.stages[i].kind == kinds[i]);
      CHECK(c.stages[i].resolution_divisor == (Index{4} << i));
      CHECK(c.stages[i].heads.has_value() == (kinds[i] == BlockKind::Transformer));
    }
    CHECK(c.stages[3].heads == 5);
    CHECK(c.stages[4].heads == 8);
    CHECK(c.stem == StemKind::Hr);
    CHECK(c.downsamplers == std::vector<DownsampleKind>{DownsampleKind::IrdsA, DownsampleKind::IrdsA,
                                                        DownsampleKind::IrdsB, DownsampleKind::IrdsB});
  }

  TEST_CASE("B and L columns") {
    const ModelConfig b = hiri_vit_config(Variant::B);
    CHECK(b.stages[0].channels == 64);
    CHECK(b.stages[3].depth == 17);
    CHECK(b.stages[4].channels == 640);
    CHECK(b.stages[4].heads == 10);
    const ModelConfig l = hiri_vit_config(Variant::L);
    CHECK(l.stages[3].heads == 7);
    CHECK(l.stages[3].channels == 448);
    CHECK(l.stages[3].depth == 25);
    CHECK(l.stages[3].sr_ratio == 2);
    CHECK(l.stages[4].sr_ratio == 1);
  }

  TEST_CASE("S and B parameter totals") {
    CHECK(within(Model(hiri_vit_config(Variant::S)).param_count() / 1e6, 34.8) <= 0.03);
    CHECK(within(Model(hiri_vit_config(Variant::B)).param_count() / 1e6, 54.4) <= 0.03);
  }

  TEST_CASE("declared count equals the built tree") {
    for (Variant v : {Variant::S, Variant::Micro}) {
      const BuiltModel built = build_hiri_vit(v, 224, 1000, 0);
      CHECK(built.params.parameter_count() == built.model.param_count());
    }
  }

  TEST_CASE("variant names") {
    CHECK(parse_variant("S") == Variant::S);
    CHECK(parse_variant("l") == Variant::L);
    CHECK(parse_variant("micro") == Variant::Micro);
    CHECK_THROWS_AS(parse_variant("XL"), ConfigError);
  }

  TEST_CASE("resolution must be a multiple of 32") {
    CHECK_THROWS_AS(build_hiri_vit(Variant::S, 200, 1000, 0), ConfigError);
    CHECK_THROWS_AS(build_hiri_vit(Variant::S, 0, 1000, 0), ConfigError);
    const Model model(hiri_vit_config(Variant::Micro, 64));
    CHECK_THROWS_AS(model.check_input({1, 3, 64, 48 + 8}), ResolutionError);
    CHECK_THROWS_AS(model.check_input({1, 1, 64, 64}), DimensionError);
  }

  TEST_CASE("attention maps must cover the reduction kernel") {
    // micro reduces keys 2x in stage 4, whose map is res/32 wide
    CHECK_THROWS_AS(build_hiri_vit(Variant::Micro, 32, 2, 0), ConfigError);
    const Model model(hiri_vit_config(Variant::Micro, 64));
    CHECK_THROWS_AS(model.check_input({1, 3, 32, 64}), ResolutionError);
    CHECK_NOTHROW(model.check_input({1, 3, 64, 96}));
    CHECK_NOTHROW(build_hiri_vit(Variant::S, 64, 10, 0));
  }
}

TEST_SUITE("ablation ladder") {
  TEST_CASE("rows 1 and 6 parameter totals") {
    CHECK(within(Model(mvit_row_config(1)).param_count() / 1e6, 35.0) <= 0.03);
    CHECK(within(Model(mvit_row_config(6)).param_count() / 1e6, 34.5) <= 0.03);
  }

  TEST_CASE("each row is a delta of the previous") {
    const ModelConfig r1 = mvit_row_config(1), r2 = mvit_row_config(2), r3 = mvit_row_config(3);
    const ModelConfig r4 = mvit_row_config(4), r5 = mvit_row_config(5), r6 = mvit_row_config(6), r7 = mvit_row_config(7);
    CHECK(r1.stages.size() == 4);
    CHECK(r1.stem == StemKind::Vit);
    CHECK_FALSE(r1.stages[0].conv_ffn);
    CHECK(r2.stages[0].conv_ffn);
    CHECK(r2.stages[0].kind == BlockKind::Transformer);
    CHECK(r3.stages[0].kind == BlockKind::Cffn);
    CHECK(r3.stages[1].kind == BlockKind::Cffn);
    CHECK(r3.stages[2].kind == BlockKind::Transformer);
    CHECK(r3.stages[0].ffn_norm == NormKind::Layer);
    CHECK(r4.stages[0].ffn_norm == NormKind::Batch);
    CHECK(r4.stem == StemKind::Vit);
    CHECK(r5.stem == StemKind::Conv);
    CHECK(r5.downsamplers[0] == DownsampleKind::Plain);
    CHECK(r6.downsamplers[0] == DownsampleKind::IrdsA);
    CHECK(r6.resolution == 224);
    CHECK(r7.resolution == 448);
    ModelConfig r7_at_224 = r7;
    r7_at_224.resolution = 224;
    r7_at_224.name = r6.name;
    CHECK(r7_at_224 == r6);
    CHECK_THROWS_AS(mvit_row_config(8), ConfigError);
  }

  TEST_CASE("baseline builds and runs at a small input") {
    BuiltModel built = build_mvit_baseline(mvit_row_config(6, 3), 1);
    Rng rng(2);
    const Array y = logits(built, built.params, randn({1, 3, 64, 64}, rng));
    CHECK(y.shape() == Shape{1, 3});
    CHECK(all_finite(y));
  }
}

TEST_SUITE("forward") {
  TEST_CASE("micro model logits are finite") {
    BuiltModel built = build_hiri_vit(Variant::Micro, 64, 5, 3);
    Rng rng(4);
    const Array y = logits(built, built.params, randn({2, 3, 64, 64}, rng));
    CHECK(y.shape() == Shape{2, 5});
    CHECK(all_finite(y));
  }

  TEST_CASE("batch independence in eval mode") {
    BuiltModel built = build_hiri_vit(Variant::Micro, 64, 4, 5);
    Rng rng(6);
    // Non-trivial running statistics.
    train_forward(built.model, built.params, randn({4, 3, 64, 64}, rng));
    const Array a = randn({2, 3, 64, 64}, rng), b = randn({3, 3, 64, 64}, rng);
    Array ab({5, 3, 64, 64});
    std::copy_n(a.data(), a.size(), ab.data());
    std::copy_n(b.data(), b.size(), ab.data() + a.size());
    const Array joint = logits(built, built.params, ab);
    CHECK(max_abs_diff(batch_slice(joint, 0, 2), logits(built, built.params, a)) < 1e-10);
    CHECK(max_abs_diff(batch_slice(joint, 2, 3), logits(built, built.params, b)) < 1e-10);
  }

  TEST_CASE("eval forward is pure") {
    BuiltModel built = build_hiri_vit(Variant::Micro, 96, 3, 7);
    Rng rng(8);
    const Array x = randn({2, 3, 96, 96}, rng);
    const ParamTree before = built.params;
    CHECK(logits(built, built.params, x) == logits(built, built.params, x));
    CHECK(built.params == before);
  }

  TEST_CASE("same seed gives bit-identical trees") {
    CHECK(build_hiri_vit(Variant::S, 224, 1000, 11).params == build_hiri_vit(Variant::S, 224, 1000, 11).params);
    CHECK_FALSE(build_hiri_vit(Variant::Micro, 64, 2, 11).params == build_hiri_vit(Variant::Micro, 64, 2, 12).params);
  }

  TEST_CASE("initialization") {
    const BuiltModel built = build_hiri_vit(Variant::S, 224, 1000, 13);
    double sum = 0.0, sq = 0.0;
    Index n = 0, wrong = 0;
    const auto expect_all = [&wrong](const Array& a, double value) {
      for (double v : a.values()) wrong += v != value;
    };
    for (const auto& e : built.params) {
      const bool is_norm = e.path.find("bn") != std::string::npos || e.path.find("norm") != std::string::npos;
      if (e.path.ends_with(".running_mean")) {
        expect_all(e.tensor.data(), 0.0);
      } else if (e.path.ends_with(".running_var")) {
        expect_all(e.tensor.data(), 1.0);
      } else if (e.path.ends_with(".bias")) {
        expect_all(e.tensor.data(), 0.0);
      } else if (is_norm) {
        expect_all(e.tensor.data(), 1.0);
      } else {
        for (double v : e.tensor.data().values()) {
          wrong += std::abs(v) > 0.04;
          sum += v;
          sq += v * v;
          ++n;
        }
      }
      CHECK(e.tensor.requires_grad() == !is_buffer_name(e.path));
    }
    CHECK(wrong == 0);
    // std of N(0, 0.02) truncated at two sigma
    const double phi2 = std::exp(-2.0) / std::sqrt(2.0 * std::numbers::pi);
    const double expected = 0.02 * std::sqrt(1.0 - 4.0 * phi2 / std::erf(2.0 / std::numbers::sqrt2));
    const double mean = sum / n;
    CHECK(std::abs(mean) < 1e-4);
    CHECK(std::abs(std::sqrt(sq / n - mean * mean) - expected) < 1e-4);
  }
}

TEST_SUITE("stage shapes") {
  TEST_CASE("divisors for 224, 384, 448, 768") {
    const Model model(hiri_vit_config(Variant::S));
    for (Index r : {224, 384, 448, 768}) {
      const auto shapes = model.stage_shapes({1, 3, r, r});
      REQUIRE(shapes.size() == 5);
      for (std::size_t i = 0; i < 5; ++i) {
        const Index div = Index{4} << i;
        CHECK(shapes[i][1] == model.config().stages[i].channels);
        // 224 is not a multiple of 64; the last stage rounds up
        CHECK(shapes[i][2] == (r + div - 1) / div);
        if (r % div == 0) CHECK(shapes[i][2] * div == r);
      }
    }
    const auto s448 = model.stage_shapes({1, 3, 448, 448});
    CHECK(s448[0] == Shape{1, 32, 112, 112});
    CHECK(s448[4] == Shape{1, 512, 7, 7});
  }

  TEST_CASE("shapes agree with an actual forward") {
    BuiltModel built = build_hiri_vit(Variant::Micro, 64, 2, 14);
    Rng rng(15);
    Tape tape(false);
    const Context ctx{tape, built.params, Mode::Eval};
    const Var f = built.model.features(ctx, tape.constant(randn({1, 3, 64, 64}, rng)));
    CHECK(f.shape() == built.model.stage_shapes({1, 3, 64, 64}).back());
    CHECK(f.shape() == Shape{1, 40, 1, 1});
  }
}

TEST_SUITE("config files") {
  TEST_CASE("format and parse round-trip") {
    std::vector<ModelConfig> configs{hiri_vit_config(Variant::S), hiri_vit_config(Variant::L, 448, 10),
                                     hiri_vit_config(Variant::Micro, 64, 2)};
    for (int row = 1; row <= 7; ++row) configs.push_back(mvit_row_config(row));
    for (const ModelConfig& c : configs) {
      const std::string text = format_config(c);
      const ModelConfig parsed = parse_config(text);
      CHECK(parsed == c);
      CHECK(format_config(parsed) == text);
      CHECK(Model(parsed).param_count() == Model(c).param_count());
    }
  }

  TEST_CASE("comments, blank lines and defaults") {
    const std::string text =
        "# tiny\n\nname: t\nfamily: hiri\nresolution: 64\nnum_classes: 2\nstem: hr\n"
        "downsample: irds_a, irds_a, irds_b, irds_b\n"
        "stage: kind=hr depth=1 channels=8 expansion=2 sr_ratio=1 conv_ffn=true ffn_norm=bn divisor=4\n"
        "stage: kind=hr depth=1 channels=16 expansion=2 sr_ratio=1 conv_ffn=true ffn_norm=bn divisor=8\n"
        "stage: kind=cffn depth=1 channels=24 expansion=2 sr_ratio=1 conv_ffn=true ffn_norm=bn divisor=16\n"
        "stage: kind=transformer depth=1 channels=32 expansion=2 heads=2 sr_ratio=2 conv_ffn=true ffn_norm=bn divisor=32\n"
        "stage: kind=transformer depth=1 channels=40 expansion=2 heads=2 sr_ratio=1 conv_ffn=true ffn_norm=bn divisor=64\n";
    const ModelConfig c = parse_config(text);
    CHECK(c.stem_width == 8);
    CHECK(c.irds_a_expansion == 2);
    ModelConfig micro = hiri_vit_config(Variant::Micro, 64, 2);
    micro.name = "t";
    CHECK(c == micro);
  }

  TEST_CASE("rejections") {
    const std::string good = format_config(hiri_vit_config(Variant::Micro, 64, 2));
    const auto replace = [&good](const std::string& from, const std::string& to) {
      std::string s = good;
      const auto at = s.find(from);
      REQUIRE(at != std::string::npos);
      return s.replace(at, from.size(), to);
    };
    CHECK_THROWS_AS(parse_config(good + "colour: red\n"), ConfigError);
    CHECK_THROWS_AS(parse_config(good + "resolution: 64\n"), ConfigError);
    CHECK_THROWS_AS(parse_config(replace("name: ", "nom: ")), ConfigError);
    CHECK_THROWS_AS(parse_config(replace("depth=1", "depth=1 width=3")), ConfigError);
    CHECK_THROWS_AS(parse_config(replace("resolution: 64", "resolution: 65")), ConfigError);
    CHECK_THROWS_AS(parse_config(replace("resolution: 64", "resolution: sixty")), ConfigError);
    CHECK_THROWS_AS(parse_config(replace("heads=2", "heads=3")), ConfigError);
    CHECK_THROWS_AS(parse_config(replace("kind=hr depth=1 channels=8", "kind=hr depth=1 channels=8 heads=2")), ConfigError);
    CHECK_THROWS_AS(parse_config(replace("divisor=8", "divisor=4")), ConfigError);
    CHECK_THROWS_AS(parse_config(replace("irds_a, irds_a", "irds_a")), ConfigError);
    CHECK_THROWS_AS(parse_config(replace("kind=cffn", "kind=mlp")), ConfigError);
    try {
      parse_config(good + "bogus: 1\n");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("bogus") != std::string::npos);
      CHECK(std::string(e.what()).find("line") != std::string::npos);
    }
  }

  TEST_CASE("load from file") {
    const fs::path p = scratch("micro.cfg");
    const ModelConfig c = hiri_vit_config(Variant::Micro, 64, 2);
    std::ofstream(p) << format_config(c);
    CHECK(load_config(p) == c);
    CHECK_THROWS_AS(load_config(scratch("missing.cfg")), ConfigError);
  }
}

TEST_SUITE("checkpoints") {
  TEST_CASE("round-trip is bit-exact including running statistics") {
    BuiltModel built = build_hiri_vit(Variant::Micro, 64, 2, 16);
    Rng rng(17);
    train_forward(built.model, built.params, randn({2, 3, 64, 64}, rng));
    CHECK(built.params.at("stem.bn_out.running_mean").data()[0] != 0.0);
    // Awkward values survive too.
    built.params.at("head.fc.bias").data()[0] = -0.0;
    built.params.at("head.fc.bias").data()[1] = std::nextafter(1.0, 2.0);
    const fs::path p = scratch("micro.ckpt");
    save_checkpoint(built.params, p);
    const ParamTree loaded = load_checkpoint(p);
    CHECK(loaded == built.params);
    CHECK(std::signbit(loaded.at("head.fc.bias").data()[0]));
    CHECK_FALSE(loaded.at("stem.bn_out.running_var").requires_grad());
  }

  TEST_CASE("byte layout") {
    const std::vector<NamedArray> records{{"ab", Array({2, 1}, std::vector<double>{1.5, -2.0})},
                                          {"c", Array({1}, std::vector<double>{0.25})}};
    std::ostringstream out;
    write_records(out, records);

    std::string expected = "HIRI", payload;
    le<std::uint32_t>(expected, 1);
    for (const auto& r : records) {
      le<std::uint32_t>(expected, r.name.size());
      expected += r.name;
      le<std::uint32_t>(expected, r.value.rank());
      for (Index e : r.value.shape()) le<std::uint64_t>(expected, e);
      std::string bytes;
      for (double v : r.value.values()) le<std::uint64_t>(bytes, std::bit_cast<std::uint64_t>(v));
      expected += bytes;
      payload += bytes;
    }
    le<std::uint32_t>(expected, crc32_bitwise(payload));
    CHECK(out.str() == expected);

    std::istringstream in(expected);
    CHECK(read_records(in) == records);
  }

  TEST_CASE("corruption is detected") {
    BuiltModel built = build_hiri_vit(Variant::Micro, 64, 2, 18);
    const fs::path p = scratch("corrupt.ckpt");
    save_checkpoint(built.params, p);
    const std::string good = slurp(p);

    std::string flipped = good;
    flipped[flipped.size() - 20] ^= 0x01;  // inside the last payload
    spit(p, flipped);
    CHECK_THROWS_AS(load_checkpoint(p), FormatError);

    std::string magic = good;
    magic[0] = 'X';
    spit(p, magic);
    CHECK_THROWS_AS(load_checkpoint(p), FormatError);

    std::string version = good;
    version[4] = 2;
    spit(p, version);
    CHECK_THROWS_AS(load_checkpoint(p), FormatError);

    spit(p, good.substr(0, good.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(p), FormatError);
    spit(p, good.substr(0, 6));
    CHECK_THROWS_AS(load_checkpoint(p), FormatError);

    CHECK_THROWS_AS(load_checkpoint(scratch("does_not_exist.ckpt")), FormatError);
  }
}
