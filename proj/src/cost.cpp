#include "hiri/cost.hpp"

#include <fmt/format.h>

#include <numeric>

namespace hiri {

Index CostReport::total_params() const {
  Index t = 0;
  for (const auto& r : records) t += r.params;
  return t;
}

std::uint64_t CostReport::total_macs() const {
  std::uint64_t t = 0;
  for (const auto& r : records) t += r.macs;
  return t;
}

std::uint64_t CostReport::total_elementwise() const {
  std::uint64_t t = 0;
  for (const auto& r : records) t += r.elementwise;
  return t;
}

std::uint64_t CostReport::total_flops() const { return 2 * total_macs() + total_elementwise(); }

Index CostReport::total_activations() const {
  Index t = 0;
  for (const auto& r : records) t += r.activations;
  return t;
}

CostReport count_params(const Model& model) {
  CostReport report;
  report.model = model.config().name;
  for (const auto& m : model.modules()) report.records.push_back({m->path(), m->kind(), m->param_count()});
  return report;
}

CostReport count_params(const Model& model, const ParamTree& params) {
  CostReport report;
  report.model = model.config().name;
  for (const auto& m : model.modules()) {
    report.records.push_back({m->path(), m->kind(), params.parameter_count(m->path())});
  }
  return report;
}

CostReport count_flops(const Model& model, Index resolution, Index batch) {
  model.config().validate_resolution(resolution);
  CostReport report;
  report.model = model.config().name;
  report.resolution = resolution;
  Shape shape{batch, 3, resolution, resolution};
  for (const auto& m : model.modules()) {
    const CostTally c = m->cost(shape);
    shape = m->output_shape(shape);
    report.records.push_back({m->path(), m->kind(), m->param_count(), c.macs, c.elementwise, numel(shape)});
  }
  return report;
}

CostTally mac_counting_oracle(const Module& block, const Shape& input, std::uint64_t seed) {
  Rng rng(seed);
  ParamTree params = block.init_params(rng);
  std::normal_distribution<double> normal;
  Array x(input);
  for (double& v : x.values()) v = normal(rng);

  OpCounter counter;
  Tape tape(false);
  tape.set_counter(&counter);
  Context ctx{tape, params, Mode::Eval};
  block.forward(ctx, tape.constant(x));
  return {counter.macs, counter.elementwise};
}

std::vector<ScalingRow> scaling_report(const std::vector<ModelConfig>& models, const std::vector<Index>& resolutions) {
  if (resolutions.empty()) throw ConfigError("scaling report needs at least one resolution");
  std::vector<ScalingRow> rows;
  for (const ModelConfig& config : models) {
    const Model model(config);
    const Index params = model.param_count();
    std::uint64_t base_flops = 0, base_macs = 0;
    for (std::size_t i = 0; i < resolutions.size(); ++i) {
      const CostReport r = count_flops(model, resolutions[i]);
      ScalingRow row{config.name, resolutions[i], params, r.total_macs(), r.total_flops()};
      if (i == 0) {
        base_flops = row.flops;
        base_macs = row.macs;
      }
      row.flops_ratio = static_cast<double>(row.flops) / static_cast<double>(base_flops);
      row.macs_ratio = static_cast<double>(row.macs) / static_cast<double>(base_macs);
      rows.push_back(row);
    }
  }
  return rows;
}

ReportFormat parse_report_format(const std::string& text) {
  if (text == "table") return ReportFormat::Table;
  if (text == "csv") return ReportFormat::Csv;
  throw ConfigError("unknown format '" + text + "' (expected table or csv)");
}

std::string format_report(const CostReport& report, ReportFormat format) {
  std::string out;
  if (format == ReportFormat::Csv) {
    out += "path,params,flops,activations,macs,elementwise\n";
    for (const auto& r : report.records) {
      out += fmt::format("{},{},{},{},{},{}\n", r.path, r.params, r.flops(), r.activations, r.macs, r.elementwise);
    }
    out += fmt::format("total,{},{},{},{},{}\n", report.total_params(), report.total_flops(),
                       report.total_activations(), report.total_macs(), report.total_elementwise());
    return out;
  }
  std::size_t width = 5;
  for (const auto& r : report.records) width = std::max(width, r.path.size());
  out += fmt::format("{}", report.model);
  if (report.resolution > 0) out += fmt::format(" @ {}x{}", report.resolution, report.resolution);
  out += "\n";
  out += fmt::format("{:<{}}  {:<12} {:>12} {:>16} {:>16} {:>14}\n", "path", width, "kind", "params", "MACs", "FLOPs",
                     "activations");
  for (const auto& r : report.records) {
    out += fmt::format("{:<{}}  {:<12} {:>12} {:>16} {:>16} {:>14}\n", r.path, width, r.kind, r.params, r.macs,
                       r.flops(), r.activations);
  }
  out += fmt::format("{:<{}}  {:<12} {:>12} {:>16} {:>16} {:>14}\n", "total", width, "", report.total_params(),
                     report.total_macs(), report.total_flops(), report.total_activations());
  out += fmt::format("params {:.2f}M  GMACs {:.3f}  GFLOPs {:.3f}\n", report.total_params() / 1e6,
                     report.total_macs() / 1e9, report.total_flops() / 1e9);
  return out;
}

std::string format_scaling(const std::vector<ScalingRow>& rows, ReportFormat format) {
  std::string out;
  if (format == ReportFormat::Csv) {
    out += "model,resolution,params,macs,flops,flops_ratio,macs_ratio\n";
    for (const auto& r : rows) {
      out += fmt::format("{},{},{},{},{},{:.6f},{:.6f}\n", r.model, r.resolution, r.params, r.macs, r.flops,
                         r.flops_ratio, r.macs_ratio);
    }
    return out;
  }
  std::size_t width = 5;
  for (const auto& r : rows) width = std::max(width, r.model.size());
  out += fmt::format("{:<{}}  {:>6} {:>10} {:>9} {:>10} {:>11} {:>10}\n", "model", width, "res", "params(M)", "GMACs",
                     "GFLOPs", "FLOPs ratio", "MACs ratio");
  for (const auto& r : rows) {
    out += fmt::format("{:<{}}  {:>6} {:>10.2f} {:>9.3f} {:>10.3f} {:>11.3f} {:>10.3f}\n", r.model, width,
                       r.resolution, r.params / 1e6, r.macs / 1e9, r.flops / 1e9, r.flops_ratio, r.macs_ratio);
  }
  return out;
}

}  // namespace hiri
