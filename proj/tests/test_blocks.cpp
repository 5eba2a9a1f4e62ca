#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <memory>
#include <numeric>

#include "hiri/block_checks.hpp"
#include "hiri/blocks.hpp"
#include "support.hpp"

using namespace hiri;
using hiri::test::randn;

namespace {

Array run(const Module& m, ParamTree& params, const Array& x, Mode mode = Mode::Eval) {
  Tape tape(false);
  const Context ctx{tape, params, mode};
  return m.forward(ctx, tape.constant(x)).value();
}

Array run_attention(const MultiHeadAttention& attn, ParamTree& params, const Array& tokens, Index h, Index w) {
  Tape tape(false);
  const Context ctx{tape, params, Mode::Eval};
  return attn.forward(ctx, tape.constant(tokens), h, w).value();
}

ParamTree attention_params(const MultiHeadAttention& attn, std::uint64_t seed) {
  std::vector<ParamSpec> specs;
  attn.declare(specs);
  Rng rng(seed);
  ParamTree params = make_params(specs, rng);
  // Larger than the init scale so the softmax is far from uniform.
  for (auto& e : params) e.tensor.data() = randn(e.tensor.shape(), rng, 0.5);
  return params;
}

void fill_matching(ParamTree& params, const std::string& needle, double value) {
  for (auto& e : params) {
    if (e.path.find(needle) != std::string::npos) e.tensor.data().fill(value);
  }
}

// y[t] = W x[t] + b over the last axis of a [n, din] row block.
std::vector<double> affine(const Array& w, const Array& b, const double* x) {
  const Index dout = w.dim(0), din = w.dim(1);
  std::vector<double> y(static_cast<std::size_t>(dout));
  for (Index o = 0; o < dout; ++o) {
    double acc = b[o];
    for (Index i = 0; i < din; ++i) acc += w[o * din + i] * x[i];
    y[static_cast<std::size_t>(o)] = acc;
  }
  return y;
}

// Dense-loop attention for one image without spatial reduction.
Array attention_oracle(ParamTree& p, const std::string& path, const Array& x, Index heads) {
  const Index n = x.dim(1), d = x.dim(2), dh = d / heads;
  const auto proj = [&](const std::string& name, Index t) {
    return affine(p.at(path + "." + name + ".weight").data(), p.at(path + "." + name + ".bias").data(), x.data() + t * d);
  };
  std::vector<std::vector<double>> q, k, v;
  for (Index t = 0; t < n; ++t) {
    q.push_back(proj("q", t));
    k.push_back(proj("k", t));
    v.push_back(proj("v", t));
  }
  Array concat({n, d});
  for (Index h = 0; h < heads; ++h) {
    for (Index i = 0; i < n; ++i) {
      std::vector<long double> s(static_cast<std::size_t>(n));
      long double top = -1e300L, total = 0.0L;
      for (Index j = 0; j < n; ++j) {
        long double dot = 0.0L;
        for (Index c = h * dh; c < (h + 1) * dh; ++c) dot += static_cast<long double>(q[i][c]) * k[j][c];
        s[j] = dot / std::sqrt(static_cast<long double>(dh));
        top = std::max(top, s[j]);
      }
      for (auto& e : s) total += e = std::exp(e - top);
      for (Index c = h * dh; c < (h + 1) * dh; ++c) {
        long double acc = 0.0L;
        for (Index j = 0; j < n; ++j) acc += s[j] / total * v[j][c];
        concat[i * d + c] = static_cast<double>(acc);
      }
    }
  }
  Array out({1, n, d});
  for (Index t = 0; t < n; ++t) {
    const auto y = affine(p.at(path + ".proj.weight").data(), p.at(path + ".proj.bias").data(), concat.data() + t * d);
    std::copy(y.begin(), y.end(), out.data() + t * d);
  }
  return out;
}

}  // namespace

TEST_SUITE("stem") {
  TEST_CASE("hr stem quarters the resolution") {
    const HrStem stem("stem", 3, 32, 32);
    Rng rng(1);
    ParamTree params = stem.init_params(rng);
    const Array y = run(stem, params, randn({1, 3, 224, 224}, rng));
    CHECK(y.shape() == Shape{1, 32, 56, 56});
    CHECK(stem.output_shape({1, 3, 448, 448}) == Shape{1, 32, 112, 112});
  }

  TEST_CASE("hr stem with zero weights outputs zeros") {
    const HrStem stem("stem", 3, 8, 16);
    Rng rng(2);
    ParamTree params = stem.init_params(rng);
    for (auto& e : params) {
      if (e.tensor.requires_grad()) e.tensor.data().fill(0.0);
    }
    for (Mode mode : {Mode::Eval, Mode::Train}) {
      const Array y = run(stem, params, randn({2, 3, 16, 16}, rng), mode);
      for (double v : y.values()) CHECK(v == 0.0);
    }
  }

  TEST_CASE("hr stem rejects sides not divisible by 4") {
    const HrStem stem("stem", 3, 8, 8);
    try {
      stem.output_shape({1, 3, 226, 224});
      FAIL("expected ResolutionError");
    } catch (const ResolutionError& e) {
      CHECK(std::string(e.what()).find("stem") != std::string::npos);
    }
    Rng rng(3);
    ParamTree params = stem.init_params(rng);
    CHECK_THROWS_AS(run(stem, params, randn({1, 3, 18, 18}, rng)), ResolutionError);
    CHECK_THROWS_AS(stem.output_shape({1, 4, 16, 16}), DimensionError);
  }
}

TEST_SUITE("hr block") {
  TEST_CASE("shape is preserved") {
    const HrBlock block("b", 64, 4);
    Rng rng(4);
    ParamTree params = block.init_params(rng);
    CHECK(run(block, params, randn({2, 64, 56, 56}, rng)).shape() == Shape{2, 64, 56, 56});
  }

  TEST_CASE("zero branch weights leave the identity path") {
    const HrBlock block("b", 8, 2);
    Rng rng(5);
    ParamTree params = block.init_params(rng);
    fill_matching(params, "b.hi_dw.", 0.0);
    fill_matching(params, "b.fc2.", 0.0);
    const Array x = randn({2, 8, 6, 6}, rng);
    CHECK(run(block, params, x, Mode::Train) == x);
  }

  TEST_CASE("odd extent is a resolution error") {
    const HrBlock block("b", 8, 2);
    CHECK_THROWS_AS(block.output_shape({1, 8, 7, 8}), ResolutionError);
  }

  TEST_CASE("gradient check on 1x8x8x8") {
    BlockCheckOptions o;
    o.channels = 8;
    o.size = 8;
    o.batch = 1;
    const auto report = grad_check_block("hr_block", o);
    CHECK_MESSAGE(report.passed(), report.worst().name, " ", report.max_rel_error());
  }
}

TEST_SUITE("downsampling") {
  TEST_CASE("irds-a halves 56 to 28 and grows 32 to 64") {
    const IrdsA down("down2", 32, 64, 2);
    Rng rng(6);
    ParamTree params = down.init_params(rng);
    CHECK(run(down, params, randn({1, 32, 56, 56}, rng)).shape() == Shape{1, 64, 28, 28});
  }

  TEST_CASE("irds-b halves 28 to 14 and grows 64 to 128") {
    const IrdsB down("down3", 64, 128, 4);
    Rng rng(7);
    ParamTree params = down.init_params(rng);
    CHECK(run(down, params, randn({1, 64, 28, 28}, rng)).shape() == Shape{1, 128, 14, 14});
  }

  TEST_CASE("odd inputs round up") {
    const IrdsA a("a", 4, 6, 2);
    const IrdsB b("b", 4, 6, 2);
    CHECK(a.output_shape({1, 4, 7, 7}) == Shape{1, 6, 4, 4});
    CHECK(b.output_shape({1, 4, 7, 7}) == Shape{1, 6, 4, 4});
  }

  TEST_CASE("channel mismatch") {
    const IrdsA a("a", 4, 6, 2);
    CHECK_THROWS_AS(a.output_shape({1, 5, 8, 8}), DimensionError);
  }
}

TEST_SUITE("cffn") {
  TEST_CASE("zero fc2 gives the identity") {
    for (bool conv : {true, false}) {
      const CffnBlock block("b", 8, 4, NormKind::Batch, conv);
      Rng rng(8);
      ParamTree params = block.init_params(rng);
      fill_matching(params, "b.fc2.", 0.0);
      const Array x = randn({2, 8, 4, 4}, rng);
      CHECK(run(block, params, x, Mode::Train) == x);
    }
  }

  TEST_CASE("core parameter count for D=32, E=4") {
    const CffnBlock block("b", 32, 4);
    Rng rng(9);
    const ParamTree params = block.init_params(rng);
    const Index core = params.parameter_count("b.fc1") + params.parameter_count("b.dw") + params.parameter_count("b.fc2");
    CHECK(core == 32 * 128 + 128 + 128 * 9 + 128 + 128 * 32 + 32);
    CHECK(core == 9632);
    CHECK(block.param_count() == core + 2 * 32);
  }

  TEST_CASE("token form agrees with the spatial form") {
    const CffnBlock block("b", 8, 2, NormKind::Layer);
    Rng rng(10);
    ParamTree params = block.init_params(rng);
    const Array x = randn({1, 8, 4, 4}, rng);
    Tape tape(false);
    const Context ctx{tape, params, Mode::Eval};
    const Var spatial = block.forward(ctx, tape.constant(x));
    const Var tokens = block.forward_tokens(ctx, to_tokens(tape.constant(x)), 4, 4);
    CHECK(to_spatial(tokens, 4, 4).value() == spatial.value());
  }

  TEST_CASE("gradient check on 1x16 tokens, D=8") {
    BlockCheckOptions o;
    o.channels = 8;
    o.size = 4;
    o.batch = 1;
    CHECK(grad_check_block("cffn", o).passed());
    CHECK(grad_check_block("ffn_ln", o).passed());
  }
}

TEST_SUITE("attention") {
  TEST_CASE("single token passes V through the output projection") {
    const MultiHeadAttention attn("a", 8, 2, 1);
    ParamTree params = attention_params(attn, 11);
    Rng rng(12);
    const Array x = randn({1, 1, 8}, rng);
    const Array y = run_attention(attn, params, x, 1, 1);
    const auto v = affine(params.at("a.v.weight").data(), params.at("a.v.bias").data(), x.data());
    const auto expected = affine(params.at("a.proj.weight").data(), params.at("a.proj.bias").data(), v.data());
    for (Index c = 0; c < 8; ++c) CHECK(std::abs(y[c] - expected[c]) < 1e-14);
  }

  TEST_CASE("identical tokens give identical outputs") {
    const MultiHeadAttention attn("a", 8, 2, 1);
    ParamTree params = attention_params(attn, 13);
    Rng rng(14);
    const Array one = randn({8}, rng);
    Array x({1, 5, 8});
    for (Index t = 0; t < 5; ++t) std::copy_n(one.data(), 8, x.data() + t * 8);
    const Array y = run_attention(attn, params, x, 1, 5);
    const Array single = run_attention(attn, params, one.reshaped({1, 1, 8}), 1, 1);
    for (Index t = 0; t < 5; ++t)
      for (Index c = 0; c < 8; ++c) CHECK(std::abs(y[t * 8 + c] - single[c]) < 1e-13);
  }

  TEST_CASE("constant keys give uniform weights") {
    const MultiHeadAttention attn("a", 8, 2, 1);
    ParamTree params = attention_params(attn, 15);
    fill_matching(params, "a.k.", 0.0);
    Rng rng(16);
    const Array x = randn({1, 6, 8}, rng);
    const Array y = run_attention(attn, params, x, 2, 3);
    std::vector<double> mean_v(8, 0.0);
    for (Index t = 0; t < 6; ++t) {
      const auto v = affine(params.at("a.v.weight").data(), params.at("a.v.bias").data(), x.data() + t * 8);
      for (Index c = 0; c < 8; ++c) mean_v[c] += v[c] / 6.0;
    }
    const auto expected = affine(params.at("a.proj.weight").data(), params.at("a.proj.bias").data(), mean_v.data());
    for (Index t = 0; t < 6; ++t)
      for (Index c = 0; c < 8; ++c) CHECK(std::abs(y[t * 8 + c] - expected[c]) < 1e-13);
  }

  TEST_CASE("attention weights sum to one per query") {
    // V = 1 and an identity output projection read the row sums directly.
    for (Index sr : {1, 2}) {
      const MultiHeadAttention attn("a", 8, 4, sr);
      ParamTree params = attention_params(attn, 17 + sr);
      fill_matching(params, "a.v.weight", 0.0);
      fill_matching(params, "a.v.bias", 1.0);
      fill_matching(params, "a.proj.", 0.0);
      for (Index c = 0; c < 8; ++c) params.at("a.proj.weight").data()[c * 8 + c] = 1.0;
      Rng rng(18);
      const Array y = run_attention(attn, params, randn({2, 16, 8}, rng, 3.0), 4, 4);
      for (double v : y.values()) CHECK(std::abs(v - 1.0) < 1e-12);
    }
  }

  TEST_CASE("dense loop oracle, n=4, D=8, two heads") {
    const MultiHeadAttention attn("a", 8, 2, 1);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      ParamTree params = attention_params(attn, 100 + seed);
      Rng rng(200 + seed);
      const Array x = randn({1, 4, 8}, rng);
      const Array y = run_attention(attn, params, x, 2, 2);
      CHECK(max_abs_diff(y, attention_oracle(params, "a", x, 2)) < 1e-10);
    }
  }

  TEST_CASE("permutation equivariance without spatial reduction") {
    const MultiHeadAttention attn("a", 8, 2, 1);
    ParamTree params = attention_params(attn, 19);
    Rng rng(20);
    const Index n = 9;
    const Array x = randn({1, n, 8}, rng);
    std::vector<Index> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Array xp({1, n, 8});
    for (Index t = 0; t < n; ++t) std::copy_n(x.data() + perm[t] * 8, 8, xp.data() + t * 8);
    const Array y = run_attention(attn, params, x, 3, 3);
    const Array yp = run_attention(attn, params, xp, 3, 3);
    for (Index t = 0; t < n; ++t)
      for (Index c = 0; c < 8; ++c) CHECK(std::abs(yp[t * 8 + c] - y[perm[t] * 8 + c]) < 1e-12);
  }

  TEST_CASE("spatial reduction shrinks the key grid") {
    CHECK(MultiHeadAttention("a", 8, 2, 2).kv_tokens(14, 14) == 49);
    CHECK(MultiHeadAttention("a", 8, 2, 2).kv_tokens(7, 7) == 9);
    CHECK(MultiHeadAttention("a", 8, 2, 1).kv_tokens(7, 7) == 49);
  }

  TEST_CASE("heads must divide the width") {
    CHECK_THROWS_AS(MultiHeadAttention("a", 10, 3, 1), ConfigError);
    CHECK_THROWS_AS(TransformerBlock("t", 10, 4, 1, 2), ConfigError);
  }

  TEST_CASE("gradient check") { CHECK(grad_check_block("mha").passed()); }
}

TEST_SUITE("transformer block") {
  TEST_CASE("zero projections give the identity") {
    const TransformerBlock block("t", 8, 2, 2, 2);
    Rng rng(21);
    ParamTree params = block.init_params(rng);
    fill_matching(params, "t.attn.proj.", 0.0);
    fill_matching(params, "t.ffn.fc2.", 0.0);
    const Array x = randn({2, 8, 4, 4}, rng);
    const Array y = run(block, params, x, Mode::Train);
    CHECK(y.shape() == x.shape());
    CHECK(y == x);
  }

  TEST_CASE("gradient check on 1x4 tokens, D=8") {
    BlockCheckOptions o;
    o.channels = 8;
    o.size = 2;
    o.batch = 1;
    CHECK(grad_check_block("transformer", o).passed());
  }
}

TEST_SUITE("classifier") {
  TEST_CASE("constant map gives the linear map of the constant") {
    const Classifier head("head", 4, 3);
    Rng rng(22);
    ParamTree params = head.init_params(rng);
    params.at("head.fc.bias").data() = randn({3}, rng);
    const Array c = randn({4}, rng);
    Array x({1, 4, 3, 3});
    for (Index ch = 0; ch < 4; ++ch)
      for (Index i = 0; i < 9; ++i) x[ch * 9 + i] = c[ch];
    const Array y = run(head, params, x);
    const auto expected = affine(params.at("head.fc.weight").data(), params.at("head.fc.bias").data(), c.data());
    for (Index k = 0; k < 3; ++k) CHECK(std::abs(y[k] - expected[k]) < 1e-14);
  }

  TEST_CASE("zero weights give zero logits") {
    const Classifier head("head", 4, 3);
    Rng rng(23);
    ParamTree params = head.init_params(rng);
    fill_matching(params, "head.fc.", 0.0);
    const Array y = run(head, params, randn({2, 4, 3, 3}, rng));
    for (double v : y.values()) CHECK(v == 0.0);
  }

  TEST_CASE("position logits average to the pooled logits") {
    const Classifier head("head", 4, 3);
    Rng rng(24);
    ParamTree params = head.init_params(rng);
    const Array x = randn({2, 4, 3, 2}, rng);
    Tape tape(false);
    const Context ctx{tape, params, Mode::Eval};
    const Array maps = head.position_logits(ctx, tape.constant(x)).value();
    REQUIRE(maps.shape() == Shape{2, 3, 3, 2});
    const Array pooled = global_avg_pool(tape.constant(maps)).value();
    CHECK(max_abs_diff(pooled, run(head, params, x)) < 1e-14);
  }
}

TEST_SUITE("properties") {
  TEST_CASE("shape inference agrees with forward on 50 random configs") {
    Rng rng(25);
    const auto pick = [&rng](Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); };
    for (int trial = 0; trial < 50; ++trial) {
      const Index c = 2 * pick(1, 4), c2 = 2 * pick(1, 4), side = 4 * pick(1, 3), n = pick(1, 2);
      std::unique_ptr<Module> m;
      Shape in{n, c, side, side};
      switch (trial % 10) {
        case 0: m = std::make_unique<HrStem>("m", 3, c, c2); in[1] = 3; break;
        case 1: m = std::make_unique<ConvStem>("m", 3, c, c2); in[1] = 3; break;
        case 2: m = std::make_unique<VitStem>("m", 3, c); in[1] = 3; break;
        case 3: m = std::make_unique<HrBlock>("m", c, pick(1, 3)); break;
        case 4: m = std::make_unique<IrdsA>("m", c, c2, pick(1, 3)); in[2] += pick(0, 1); break;
        case 5: m = std::make_unique<IrdsB>("m", c, c2, pick(1, 3)); in[3] += pick(0, 1); break;
        case 6: m = std::make_unique<PlainDownsample>("m", c, c2); break;
        case 7: m = std::make_unique<CffnBlock>("m", c, pick(1, 3), pick(0, 1) ? NormKind::Batch : NormKind::Layer, pick(0, 1)); break;
        case 8: m = std::make_unique<TransformerBlock>("m", c, 2, pick(1, 2), pick(1, 3)); break;
        default: m = std::make_unique<Classifier>("m", c, c2); break;
      }
      ParamTree params = m->init_params(rng);
      const Array y = run(*m, params, randn(in, rng), pick(0, 1) ? Mode::Train : Mode::Eval);
      CHECK_MESSAGE(m->output_shape(in) == y.shape(), m->kind(), " ", shape_string(in));
    }
  }

  TEST_CASE("stem and downsamplers divide the side exactly") {
    for (Index side : {32, 64, 96, 224}) {
      CHECK(HrStem("s", 3, 4, 4).output_shape({1, 3, side, side})[2] == side / 4);
      CHECK(IrdsA("a", 4, 4, 2).output_shape({1, 4, side, side})[2] == side / 2);
      CHECK(IrdsB("b", 4, 4, 2).output_shape({1, 4, side, side})[2] == side / 2);
    }
  }

  TEST_CASE("every named block passes the gradient check") {
    for (const auto& name : gradcheck_block_names()) {
      const auto report = grad_check_block(name);
      CHECK_MESSAGE(report.passed(), name, ": ", report.worst().name, " ", report.max_rel_error());
    }
    CHECK_THROWS_AS(grad_check_block("nope"), ConfigError);
  }
}
