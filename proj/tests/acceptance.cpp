// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <fmt/format.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "block_factories.hpp"
#include "hiri/block_checks.hpp"
#include "hiri/cost.hpp"
#include "hiri/serialize.hpp"
#include "hiri/train.hpp"
#include "support.hpp"

using namespace hiri;
using namespace hiri::test;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> details;

  void check(bool ok, std::string line) {
    pass = pass && ok;
    details.push_back(fmt::format("{} {}", ok ? "ok  " : "MISS", line));
  }
};

double rel(double measured, double expected) { return (measured - expected) / expected; }

Array one_hot(const std::vector<Index>& labels, Index k) {
  Array y({static_cast<Index>(labels.size()), k});
  for (std::size_t i = 0; i < labels.size(); ++i) y[static_cast<Index>(i) * k + labels[i]] = 1.0;
  return y;
}

// ------------------------------------------------------------ criteria

Outcome parameter_counts() {
  Outcome o;
  for (auto [v, expected] : {std::pair{Variant::S, 34.8}, {Variant::B, 54.4}, {Variant::L, 94.4}}) {
    const double m = count_params(Model(hiri_vit_config(v))).total_params() / 1e6;
    o.check(std::abs(rel(m, expected)) <= 0.03,
            fmt::format("{:<12} {:8.3f}M  expected {:5.1f}M  rel {:+6.2f}%  (tol 3%)", to_string(v), m, expected,
                        100 * rel(m, expected)));
  }
  return o;
}

Outcome flop_counts() {
  Outcome o;
  const std::vector<Index> res{224, 384, 448};
  const std::vector<std::pair<Variant, std::vector<double>>> expected{
      {Variant::S, {4.5, 4.7, 5.0}}, {Variant::B, {8.2, 9.3, 9.9}}, {Variant::L, {17.0, 18.2, 19.9}}};
  for (const auto& [v, giga] : expected) {
    const Model model(hiri_vit_config(v));
    for (std::size_t i = 0; i < res.size(); ++i) {
      const CostReport r = count_flops(model, res[i]);
      // published "FLOPs" are compared with multiply-accumulates
      const double gmacs = r.total_macs() / 1e9;
      o.check(std::abs(rel(gmacs, giga[i])) <= 0.10,
              fmt::format("{:<12} @{:<3}  {:7.3f} GMACs  expected {:5.1f}  rel {:+7.2f}%  (tol 10%)  [2*MACs+ew = "
                          "{:.3f} GFLOPs]",
                          to_string(v), res[i], gmacs, giga[i], 100 * rel(gmacs, giga[i]), r.total_flops() / 1e9));
    }
  }
  return o;
}

Outcome scaling_claim() {
  Outcome o;
  const auto rows = scaling_report({hiri_vit_config(Variant::S), mvit_row_config(6)}, {224, 448});
  for (const ScalingRow& r : rows) {
    if (r.resolution != 448) continue;
    const bool five_stage = r.model == hiri_vit_config(Variant::S).name;
    const bool ok = five_stage ? r.flops_ratio <= 1.3 : r.flops_ratio >= 4.0;
    o.check(ok, fmt::format("{:<12} FLOPs 448/224 = {:.3f}  (MACs ratio {:.3f})  required {} {}", r.model,
                            r.flops_ratio, r.macs_ratio, five_stage ? "<=" : ">=", five_stage ? 1.3 : 4.0));
  }
  return o;
}

Outcome ablation_ladder() {
  Outcome o;
  for (auto [row, expected] : {std::pair{1, 35.0}, {6, 34.5}}) {
    const BuiltModel built = build_mvit_baseline(mvit_row_config(row), 0);
    const double m = built.params.parameter_count() / 1e6;
    o.check(std::abs(rel(m, expected)) <= 0.03 && built.params.parameter_count() == built.model.param_count(),
            fmt::format("row {}  {:8.3f}M  expected {:4.1f}M  rel {:+6.2f}%  (tol 3%)", row, m, expected,
                        100 * rel(m, expected)));
  }
  return o;
}

Outcome flop_oracle() {
  Outcome o;
  Rng rng(2024);
  for (const auto& [name, make] : factories()) {
    int agree = 0, trials = 12;
    std::string first_miss;
    for (int t = 0; t < trials; ++t) {
      auto [block, in] = make(rng);
      const CostTally analytic = block->cost(in), counted = mac_counting_oracle(*block, in, t);
      if (analytic == counted) {
        ++agree;
      } else if (first_miss.empty()) {
        first_miss = fmt::format(" first miss {} macs {} vs {}", shape_string(in), analytic.macs, counted.macs);
      }
    }
    o.check(agree == trials, fmt::format("{:<12} {}/{} random configs exact{}", name, agree, trials, first_miss));
  }
  for (Index r : {64, 96}) {
    BuiltModel built = build_hiri_vit(Variant::Micro, r, 5, 1);
    const CostTally counted = count_forward(built.model, built.params, randn({2, 3, r, r}, rng));
    const CostReport report = count_flops(built.model, r, 2);
    o.check(report.total_macs() == counted.macs && report.total_elementwise() == counted.elementwise,
            fmt::format("micro model @{} batch 2: count_flops {} MACs, counted forward {}", r, report.total_macs(),
                        counted.macs));
  }
  return o;
}

Outcome gradient_suite() {
  Outcome o;
  for (const std::string& name : gradcheck_block_names()) {
    BlockCheckOptions opts;
    opts.tolerance = 1e-4;
    const GradCheckReport r = grad_check_block(name, opts);
    o.check(r.passed(), fmt::format("{:<16} worst rel err {:.2e} ({})", name, r.max_rel_error(), r.worst().name));
  }
  return o;
}

Outcome shape_suite() {
  Outcome o;
  const Model model(hiri_vit_config(Variant::S));
  for (Index r : {224, 384, 448, 768}) {
    const auto shapes = model.stage_shapes({1, 3, r, r});
    bool ok = shapes.size() == 5;
    std::string sides;
    for (std::size_t i = 0; ok && i < 5; ++i) {
      const Index div = Index{4} << i;
      // sides that do not divide evenly round up
      ok = shapes[i][2] == (r + div - 1) / div && shapes[i][3] == shapes[i][2] &&
           shapes[i][1] == model.config().stages[i].channels;
      sides += fmt::format("{}{}", i ? "/" : "", shapes[i][2]);
    }
    o.check(ok, fmt::format("input {:<3}  stage sides {}", r, sides));
  }
  return o;
}

Outcome distillation_algebra() {
  Outcome o;
  Rng rng(8);

  {
    BuiltModel teacher = build_hiri_vit(Variant::Micro, 64, 3, 1);
    const Array xa = randn({2, 3, 64, 64}, rng), xb = randn({2, 3, 64, 64}, rng);
    bool exact = true;
    for (int t = 0; t < 10; ++t) {
      const MixedSample s = cutmix(xa, one_hot({0, 1}, 3), xb, one_hot({2, 0}, 3), rng);
      exact = exact && distill_target(teacher.model, teacher.params, xa, xb, s, 1.0).y_bar == s.y;
    }
    o.check(exact, "alpha = 1 returns the Cutmix label bit-exactly (10 draws)");
  }

  {
    ParamTree t0, student;
    t0.add("w", randn({4, 3}, rng));
    t0.add("bn.running_var", randn({3}, rng), false);
    student.add("w", randn({4, 3}, rng));
    student.add("bn.running_var", randn({3}, rng), false);
    double worst = 0.0;
    for (double d : {0.0, 0.5, 0.99, 0.9998, 1.0}) {
      EmaState s = make_ema(t0, d);
      const int k = 100;
      for (int i = 0; i < k; ++i) ema_update(s, student);
      const double dk = std::pow(d, k);
      auto a = t0.begin(), b = student.begin();
      for (const auto& e : s.teacher) {
        for (Index i = 0; i < e.tensor.size(); ++i) {
          const double expected = dk * a->tensor.data()[i] + (1 - dk) * b->tensor.data()[i];
          worst = std::max(worst, std::abs(e.tensor.data()[i] - expected));
        }
        ++a, ++b;
      }
    }
    o.check(worst <= 1e-12, fmt::format("EMA d^k closed form, worst error {:.2e} (tol 1e-12)", worst));
  }

  {
    BuiltModel teacher = build_hiri_vit(Variant::Micro, 128, 5, 2);
    Rng init(3);
    for (auto& e : teacher.params)
      if (e.tensor.requires_grad()) e.tensor.data() = randn(e.tensor.shape(), init, 0.3);
    const Array xa = randn({4, 3, 128, 128}, rng), xb = randn({4, 3, 128, 128}, rng);
    const Array ya = one_hot({0, 1, 2, 3}, 5), yb = one_hot({4, 4, 2, 0}, 5);
    double worst = 0.0;
    bool nonnegative = true;
    for (int t = 0; t < 8; ++t) {
      const double alpha = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      const MixedSample s = t % 2 ? mixup(xa, ya, xb, yb, rng) : cutmix(xa, ya, xb, yb, rng);
      const Array y = distill_target(teacher.model, teacher.params, xa, xb, s, alpha).y_bar;
      for (Index b = 0; b < 4; ++b) {
        double total = 0.0;
        for (Index c = 0; c < 5; ++c) {
          total += y[b * 5 + c];
          nonnegative = nonnegative && y[b * 5 + c] >= 0.0;
        }
        worst = std::max(worst, std::abs(total - 1.0));
      }
    }
    o.check(nonnegative && worst < 1e-12,
            fmt::format("y_bar is a distribution for one-hot labels, worst |sum - 1| {:.2e}", worst));
  }

  {
    // per-pixel oracle with an independent majority-vote downsample
    const Index n = 2, k = 4, h = 3, w = 3, side = 10;
    double worst = 0.0;
    for (int t = 0; t < 20; ++t) {
      Array pa({n, k}), pb({n, k});
      for (Array* p : {&pa, &pb})
        for (Index b = 0; b < n; ++b) {
          double total = 0.0;
          for (Index c = 0; c < k; ++c) total += (*p)[b * k + c] = std::exp(randn({1}, rng)[0]);
          for (Index c = 0; c < k; ++c) (*p)[b * k + c] /= total;
        }
      Array ma({n, k, h, w}), mb({n, k, h, w});
      for (Index i = 0; i < ma.size(); ++i) {
        ma[i] = pa[i / (h * w)];
        mb[i] = pb[i / (h * w)];
      }
      MixedSample s;
      s.mask = sample_cutmix_mask(side, side, rng);
      s.y = one_hot({t % k, (t + 1) % k}, k);
      const double alpha = 0.3;
      const DistillTarget d = mix_teacher_maps(ma, mb, s, alpha);
      for (Index b = 0; b < n; ++b)
        for (Index c = 0; c < k; ++c) {
          double pooled = 0.0;
          for (Index i = 0; i < h; ++i)
            for (Index j = 0; j < w; ++j) {
              Index ones = 0, total = 0;
              for (Index r = i * side / h; r < (i + 1) * side / h; ++r)
                for (Index q = j * side / w; q < (j + 1) * side / w; ++q) {
                  ones += (*s.mask)[r * side + q] == 1.0;
                  ++total;
                }
              const double m = 2 * ones > total ? 1.0 : 0.0;
              pooled += (m * pa[b * k + c] + (1 - m) * pb[b * k + c]) / (h * w);
            }
          const double y_bar = alpha * s.y[b * k + c] + (1 - alpha) * pooled;
          worst = std::max({worst, std::abs(d.y_hat[b * k + c] - pooled), std::abs(d.y_bar[b * k + c] - y_bar)});
        }
    }
    o.check(worst <= 1e-10, fmt::format("constant teacher maps vs per-pixel oracle, worst {:.2e} (tol 1e-10)", worst));
  }
  return o;
}

Outcome training_smoke() {
  Outcome o;
  const Dataset data = synthetic_quadrants(128, 64, 1);
  TrainConfig cfg;  // 200 steps, batch 16
  cfg.seed = 0;
  std::vector<TrainResult> runs;
  std::vector<double> accuracy;
  for (int run = 0; run < 2; ++run) {
    BuiltModel built = build_hiri_vit(Variant::Micro, 64, 2, cfg.seed);
    runs.push_back(train_loop(built.model, built.params, data, cfg));
    accuracy.push_back(evaluate_accuracy(built.model, runs.back().student, data));
  }
  o.check(accuracy[0] >= 0.95, fmt::format("clean train accuracy after {} steps {:.4f} (required >= 0.95)", cfg.steps,
                                            accuracy[0]));
  bool same_metrics = runs[0].metrics.size() == runs[1].metrics.size();
  for (std::size_t i = 0; same_metrics && i < runs[0].metrics.size(); ++i) {
    same_metrics = format_metrics(runs[0].metrics[i]) == format_metrics(runs[1].metrics[i]);
  }
  o.check(runs[0].student == runs[1].student && runs[0].ema.teacher == runs[1].ema.teacher && same_metrics &&
              accuracy[0] == accuracy[1],
          "second run with the same seed is bit-identical");
  return o;
}

Outcome serialization() {
  Outcome o;
  const auto dir = std::filesystem::temp_directory_path() / "hiri_acceptance";
  std::filesystem::create_directories(dir);
  BuiltModel built = build_hiri_vit(Variant::Micro, 64, 3, 4);
  {
    Rng rng(5);
    Tape tape(false);
    const Context ctx{tape, built.params, Mode::Train};
    built.model.forward(ctx, tape.constant(randn({4, 3, 64, 64}, rng)));
  }
  Index moved = 0;
  for (const auto& e : built.params)
    if (e.path.ends_with(".running_mean") && !(e.tensor.data() == Array(e.tensor.shape()))) ++moved;
  const bool stats_moved = moved > 0;
  save_checkpoint(built.params, dir / "model.ckpt");
  o.check(stats_moved && load_checkpoint(dir / "model.ckpt") == built.params,
          fmt::format("checkpoint round-trip bit-exact, {} tensors incl. {} updated running means", built.params.size(),
                      moved));

  bool idempotent = true;
  std::vector<ModelConfig> configs{hiri_vit_config(Variant::S), hiri_vit_config(Variant::B, 384),
                                   hiri_vit_config(Variant::L, 448, 10), hiri_vit_config(Variant::Micro, 64, 2)};
  for (int row = 1; row <= 7; ++row) configs.push_back(mvit_row_config(row));
  for (const ModelConfig& c : configs) {
    const std::string text = format_config(c);
    const ModelConfig parsed = parse_config(text);
    const Model rebuilt(parsed);
    idempotent = idempotent && parsed == c && format_config(rebuilt.config()) == text &&
                 rebuilt.param_count() == Model(c).param_count();
  }
  o.check(idempotent, fmt::format("config parse -> build -> reparse idempotent on {} configs", configs.size()));
  std::filesystem::remove_all(dir);
  return o;
}

struct Criterion {
  int id;
  std::string name;
  double budget_seconds;
  std::function<Outcome()> run;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "parameter counts S/B/L", 60, parameter_counts},
      {2, "FLOP counts S/B/L at 224/384/448", 60, flop_counts},
      {3, "resolution scaling five vs four stages", 60, scaling_claim},
      {4, "ablation ladder rows 1 and 6", 60, ablation_ladder},
      {5, "FLOP oracle equivalence", 300, flop_oracle},
      {6, "gradient suite", 600, gradient_suite},
      {7, "stage shapes", 60, shape_suite},
      {8, "EMA-distillation algebra", 60, distillation_algebra},
      {9, "training smoke test", 600, training_smoke},
      {10, "serialization", 60, serialization},
  };
  int failed = 0;
  for (const Criterion& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome outcome;
    try {
      outcome = c.run();
    } catch (const std::exception& e) {
      outcome.check(false, fmt::format("threw: {}", e.what()));
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    outcome.check(seconds <= c.budget_seconds, fmt::format("time {:.2f}s (budget {:.0f}s)", seconds, c.budget_seconds));
    fmt::print("{} {:>2}. {}\n", outcome.pass ? "PASS" : "FAIL", c.id, c.name);
    for (const std::string& d : outcome.details) fmt::print("        {}\n", d);
    std::fflush(stdout);
    failed += !outcome.pass;
  }
  fmt::print("{} of {} criteria passed\n", criteria.size() - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
