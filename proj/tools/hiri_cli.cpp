// hiri: analyze, gradcheck, train, verify-tables, roundtrip.
// Exit codes: 0 success, 1 verification failure, 2 usage or config error.

#include <CLI11.hpp>
#include <fmt/format.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "hiri/block_checks.hpp"
#include "hiri/cost.hpp"
#include "hiri/expected.hpp"
#include "hiri/serialize.hpp"
#include "hiri/train.hpp"

namespace fs = std::filesystem;
using namespace hiri;

namespace {

constexpr int kOk = 0;
constexpr int kVerifyFailed = 1;
constexpr int kUsage = 2;

struct Common {
  std::string variant;
  std::string config;
  std::vector<Index> res;
  std::uint64_t seed = 0;
  std::string out;
};

ModelConfig resolve_config(const Common& c, const std::string& fallback_variant, Index default_res, Index classes) {
  if (!c.config.empty() && !c.variant.empty()) throw ConfigError("give either --variant or --config, not both");
  if (!c.config.empty()) return load_config(c.config);
  const Variant v = parse_variant(c.variant.empty() ? fallback_variant : c.variant);
  return hiri_vit_config(v, c.res.empty() ? default_res : c.res.front(), classes);
}

void emit(const std::string& text, const std::string& out) {
  if (out.empty()) {
    std::cout << text << std::flush;
    return;
  }
  std::ofstream f(out);
  if (!f) throw ConfigError("cannot write " + out);
  f << text;
}

int cmd_analyze(const Common& c, const std::string& format, bool blocks) {
  ModelConfig config = resolve_config(c, "S", 224, 1000);
  const ReportFormat fmt_kind = parse_report_format(format);
  const std::vector<Index> res = c.res.empty() ? std::vector<Index>{config.resolution} : c.res;
  const Model model(config);
  std::string text = format_scaling(scaling_report({config}, res), fmt_kind);
  if (blocks) {
    for (Index r : res) text += "\n" + format_report(count_flops(model, r), fmt_kind);
  }
  emit(text, c.out);
  return kOk;
}

int cmd_gradcheck(const std::string& block, const BlockCheckOptions& opts) {
  const std::vector<std::string> names =
      block == "all" ? gradcheck_block_names() : std::vector<std::string>{block};
  bool all_pass = true;
  for (const auto& name : names) {
    const GradCheckReport report = grad_check_block(name, opts);
    for (const auto& e : report.entries) {
      fmt::print("{:<16} {:<28} n={:<5} rel_err={:.3e} {}\n", name, e.name, e.elements, e.max_rel_error,
                 e.max_rel_error < opts.tolerance ? "PASS" : "FAIL");
    }
    const auto& worst = report.worst();
    fmt::print("{:<16} worst: {} (element {}) rel_err={:.3e} -> {}\n", name, worst.name, worst.worst_index,
               worst.max_rel_error, report.passed() ? "PASS" : "FAIL");
    all_pass = all_pass && report.passed();
  }
  return all_pass ? kOk : kVerifyFailed;
}

struct TrainFlags {
  Index steps = 200;
  Index batch = 16;
  double lr = 1e-3;
  Index warmup = 10;
  double alpha = 0.5;
  double ema_decay = 0.9998;
  std::string data;
  Index samples = 128;
};

int cmd_train(const Common& c, const TrainFlags& t) {
  const bool synthetic = t.data.empty();
  Dataset data;
  if (!synthetic) data = load_dataset(t.data);
  const Index classes = synthetic ? 2 : data.num_classes;
  const ModelConfig config = resolve_config(c, "micro", 64, classes);
  if (synthetic) data = synthetic_quadrants(t.samples, config.resolution, c.seed + 1);
  if (data.images.dim(2) != config.resolution || data.images.dim(3) != config.resolution) {
    throw ConfigError("dataset images are " + std::to_string(data.images.dim(2)) + "x" +
                      std::to_string(data.images.dim(3)) + ", config expects " + std::to_string(config.resolution));
  }

  BuiltModel built = build_model(config, c.seed);
  TrainConfig tc;
  tc.steps = t.steps;
  tc.batch_size = t.batch;
  tc.base_lr = t.lr;
  tc.warmup_steps = t.warmup;
  tc.alpha = t.alpha;
  tc.ema_decay = t.ema_decay;
  tc.seed = c.seed;

  const fs::path out = c.out.empty() ? fs::path("hiri_train_out") : fs::path(c.out);
  fs::create_directories(out);
  std::ofstream metrics(out / "metrics.jsonl");
  TrainResult result = train_loop(built.model, std::move(built.params), data, tc, [&](const StepMetrics& m) {
    const std::string line = format_metrics(m);
    metrics << line << '\n' << std::flush;
    std::cout << line << '\n' << std::flush;
  });
  save_checkpoint(result.student, out / "student.ckpt");
  save_checkpoint(result.ema.teacher, out / "teacher.ckpt");
  std::ofstream(out / "model.cfg") << format_config(config);
  const double acc = evaluate_accuracy(built.model, result.student, data);
  fmt::print("final clean train accuracy {:.4f}; wrote {}\n", acc, out.string());
  return kOk;
}

int cmd_verify(double tol_params, double tol_flops) {
  const auto rows = verify_tables(tol_params, tol_flops);
  int failed = 0;
  for (const auto& r : rows) {
    fmt::print("{:<4} {:<28} measured {:>8.3f}  expected {:>6.1f}  rel {:+7.2f}%  (tol {:.0f}%)  [{}]\n",
               r.pass ? "PASS" : "FAIL", r.label(), r.measured, r.expected.value, 100.0 * r.rel_error,
               100.0 * r.tolerance, r.expected.source);
    failed += !r.pass;
  }
  fmt::print("{} of {} rows within tolerance\n", rows.size() - failed, rows.size());
  return failed == 0 ? kOk : kVerifyFailed;
}

int cmd_roundtrip(const Common& c) {
  const ModelConfig config = resolve_config(c, "micro", 64, 2);
  BuiltModel built = build_model(config, c.seed);
  // Run one train-mode forward so running statistics are non-trivial.
  {
    Rng rng(c.seed);
    std::normal_distribution<double> normal;
    Array x({2, 3, config.resolution, config.resolution});
    for (double& v : x.values()) v = normal(rng);
    Tape tape(false);
    const Context ctx{tape, built.params, Mode::Train};
    built.model.forward(ctx, tape.constant(x));
  }
  const fs::path dir = c.out.empty() ? fs::temp_directory_path() : fs::path(c.out);
  fs::create_directories(dir);
  const fs::path file = dir / "roundtrip.ckpt";
  save_checkpoint(built.params, file);
  const ParamTree loaded = load_checkpoint(file);
  const bool tree_ok = loaded == built.params;

  const std::string text = format_config(config);
  const ModelConfig reparsed = parse_config(text);
  const Model rebuilt(reparsed);
  const bool config_ok = reparsed == config && format_config(rebuilt.config()) == text;

  fmt::print("{} checkpoint round-trip ({} tensors, {})\n", tree_ok ? "PASS" : "FAIL", loaded.size(), file.string());
  fmt::print("{} config parse -> build -> reparse\n", config_ok ? "PASS" : "FAIL");
  return tree_ok && config_ok ? kOk : kVerifyFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HIRI-ViT toolkit: cost analysis, gradient checks, training, table verification"};
  app.require_subcommand(1);

  Common common;
  const auto add_model_flags = [&common](CLI::App* sub, bool with_res) {
    sub->add_option("--variant", common.variant, "S, B, L or micro");
    sub->add_option("--config", common.config, "model config file");
    if (with_res) sub->add_option("--res", common.res, "input resolutions")->delimiter(',');
    sub->add_option("--seed", common.seed, "random seed");
    sub->add_option("--out", common.out, "output file or directory");
  };

  std::string format = "table";
  bool blocks = false;
  CLI::App* analyze = app.add_subcommand("analyze", "parameter and FLOP report");
  add_model_flags(analyze, true);
  analyze->add_option("--format", format, "table or csv")->check(CLI::IsMember({"table", "csv"}));
  analyze->add_flag("--blocks", blocks, "also print the per-block breakdown");

  std::string block = "all";
  BlockCheckOptions gc;
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check of a block");
  gradcheck->add_option("--block", block, "block name or 'all'");
  gradcheck->add_option("--channels", gc.channels, "block width");
  gradcheck->add_option("--size", gc.size, "spatial side");
  gradcheck->add_option("--tol", gc.tolerance, "relative error tolerance");
  gradcheck->add_option("--step", gc.step, "finite-difference step");
  gradcheck->add_option("--seed", gc.seed, "random seed");

  TrainFlags tf;
  CLI::App* train = app.add_subcommand("train", "EMA-distillation training");
  add_model_flags(train, true);
  train->add_option("--steps", tf.steps, "training steps");
  train->add_option("--batch", tf.batch, "batch size");
  train->add_option("--lr", tf.lr, "peak learning rate");
  train->add_option("--warmup", tf.warmup, "warmup steps");
  train->add_option("--alpha", tf.alpha, "weight of the mixed label against the teacher");
  train->add_option("--ema-decay", tf.ema_decay, "teacher EMA decay");
  train->add_option("--data", tf.data, "dataset file or directory (default: synthetic)");
  train->add_option("--samples", tf.samples, "synthetic dataset size");

  double tol_params = 0.03, tol_flops = 0.10;
  CLI::App* verify = app.add_subcommand("verify-tables", "compare against published params and GFLOPs");
  verify->add_option("--tol-params", tol_params, "relative tolerance for parameter counts");
  verify->add_option("--tol-flops", tol_flops, "relative tolerance for GFLOPs");

  CLI::App* roundtrip = app.add_subcommand("roundtrip", "checkpoint and config round-trip");
  add_model_flags(roundtrip, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (analyze->parsed()) return cmd_analyze(common, format, blocks);
    if (gradcheck->parsed()) return cmd_gradcheck(block, gc);
    if (train->parsed()) return cmd_train(common, tf);
    if (verify->parsed()) return cmd_verify(tol_params, tol_flops);
    if (roundtrip->parsed()) return cmd_roundtrip(common);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kVerifyFailed;
  }
  return kUsage;
}
