#include "hiri/block_checks.hpp"

#include <functional>

#include "hiri/blocks.hpp"

namespace hiri {

namespace {

Array random_array(const Shape& shape, double stddev, Rng& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  Array a(shape);
  for (double& v : a.values()) v = normal(rng);
  return a;
}

// Runs `forward` on a random input; all learnable tensors are re-drawn so
// biases and norm affines are not at their trivial initial values.
GradCheckReport check(const std::vector<ParamSpec>& specs, const Shape& input,
                      const std::function<Var(const Context&, const Var&)>& forward, const BlockCheckOptions& o) {
  Rng rng(o.seed);
  ParamTree params = make_params(specs, rng);
  for (auto& e : params) {
    if (e.tensor.requires_grad()) e.tensor.data() = random_array(e.tensor.shape(), 0.5, rng);
  }
  Tensor x(random_array(input, 1.0, rng), true);

  Array projection;
  {
    Tape probe(false);
    const Context ctx{probe, params, Mode::Train};
    projection = random_array(forward(ctx, probe.constant(x.data())).shape(), 1.0, rng);
  }

  std::vector<GradTarget> targets{{"input", &x}};
  for (auto& e : params) {
    if (e.tensor.requires_grad()) targets.push_back({e.path, &e.tensor});
  }
  const auto loss = [&](Tape& tape) {
    const Context ctx{tape, params, Mode::Train};
    return weighted_sum(forward(ctx, tape.bind(x)), projection);
  };
  return grad_check(targets, loss, o.step, o.tolerance);
}

GradCheckReport check_module(const Module& m, const Shape& input, const BlockCheckOptions& o) {
  return check(m.param_specs(), input, [&m](const Context& ctx, const Var& x) { return m.forward(ctx, x); }, o);
}

}  // namespace

const std::vector<std::string>& gradcheck_block_names() {
  static const std::vector<std::string> names{"hr_stem",  "conv_stem", "vit_stem",    "hr_block",   "irds_a",
                                              "irds_b",   "plain_down", "cffn",       "ffn_ln",     "mha",
                                              "transformer", "classifier", "position_logits", "soft_ce"};
  return names;
}

GradCheckReport grad_check_block(const std::string& name, const BlockCheckOptions& o) {
  const Index c = o.channels, s = o.size, n = o.batch;
  if (c < 2 || c % 2 != 0 || s < 2 || s % 2 != 0 || n < 1) {
    throw ConfigError("gradient check needs even channels >= 2, even size >= 2 and batch >= 1");
  }
  if (name == "hr_stem") return check_module(HrStem("b", 3, c, c + 2), {n, 3, 2 * s, 2 * s}, o);
  if (name == "conv_stem") return check_module(ConvStem("b", 3, c, c + 2), {n, 3, 2 * s, 2 * s}, o);
  if (name == "vit_stem") return check_module(VitStem("b", 3, c), {n, 3, 2 * s, 2 * s}, o);
  if (name == "hr_block") return check_module(HrBlock("b", c, 2), {n, c, s, s}, o);
  if (name == "irds_a") return check_module(IrdsA("b", c, c + 2, 2), {n, c, s + 1, s + 1}, o);
  if (name == "irds_b") return check_module(IrdsB("b", c, c + 2, 2), {n, c, s + 1, s + 1}, o);
  if (name == "plain_down") return check_module(PlainDownsample("b", c, c + 2), {n, c, s, s}, o);
  if (name == "cffn") return check_module(CffnBlock("b", c, 2), {n, c, s, s}, o);
  if (name == "ffn_ln") return check_module(CffnBlock("b", c, 2, NormKind::Layer, false), {n, c, s, s}, o);
  if (name == "transformer") return check_module(TransformerBlock("b", c, 2, 2, 2), {n, c, s, s}, o);
  if (name == "classifier") return check_module(Classifier("b", c, 3), {n, c, s, s}, o);
  if (name == "position_logits") {
    const Classifier head("b", c, 3);
    return check(head.param_specs(), {n, c, s, s},
                 [&head](const Context& ctx, const Var& x) { return head.position_logits(ctx, x); }, o);
  }
  if (name == "mha") {
    const MultiHeadAttention attn("b", c, 2, 2);
    std::vector<ParamSpec> specs;
    attn.declare(specs);
    return check(specs, {n, s * s, c},
                 [&attn, s](const Context& ctx, const Var& t) { return attn.forward(ctx, t, s, s); }, o);
  }
  if (name == "soft_ce") {
    Rng rng(o.seed + 1);
    const Index k = c + 1;
    Array target = random_array({n + 1, k}, 1.0, rng);
    for (Index r = 0; r < n + 1; ++r) {
      double total = 0.0;
      for (Index j = 0; j < k; ++j) total += target[r * k + j] = std::exp(target[r * k + j]);
      for (Index j = 0; j < k; ++j) target[r * k + j] /= total;
    }
    return check({}, {n + 1, k},
                 [target](const Context&, const Var& logits) { return soft_cross_entropy(logits, target); }, o);
  }
  throw ConfigError("unknown block '" + name + "'");
}

}  // namespace hiri
