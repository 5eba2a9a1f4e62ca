#pragma once

// Data-free parameter and operation accounting.
//
// Convention: one MAC per multiply-accumulate of a convolution (zero-padding
// taps included), linear layer or attention matmul; one elementwise op per
// output element of every other kernel (bias add, norm, activation, softmax,
// residual add, scaling, pooling). Reshapes, permutations and nearest-neighbour
// upsampling are free. FLOPs = 2 * MACs + elementwise.

#include <cstdint>
#include <string>
#include <vector>

#include "hiri/model.hpp"

namespace hiri {

struct CostRecord {
  std::string path;
  std::string kind;
  Index params = 0;
  std::uint64_t macs = 0;
  std::uint64_t elementwise = 0;
  Index activations = 0;  // elements of the block output

  std::uint64_t flops() const { return 2 * macs + elementwise; }
};

struct CostReport {
  std::string model;
  Index resolution = 0;  // 0 for parameter-only reports
  std::vector<CostRecord> records;

  Index total_params() const;
  std::uint64_t total_macs() const;
  std::uint64_t total_elementwise() const;
  std::uint64_t total_flops() const;
  Index total_activations() const;
};

/// Parameters per block from the declared tensor shapes.
CostReport count_params(const Model& model);
/// Exact tally of the learnable tensors in `params`, grouped by block path.
CostReport count_params(const Model& model, const ParamTree& params);
/// Full per-block cost of one forward pass on a batch of `batch` square images.
/// Throws ConfigError for resolutions the model cannot take.
CostReport count_flops(const Model& model, Index resolution, Index batch = 1);

/// Runs `block` on random input with counting kernels and returns what they tallied.
CostTally mac_counting_oracle(const Module& block, const Shape& input, std::uint64_t seed = 0);

struct ScalingRow {
  std::string model;
  Index resolution = 0;
  Index params = 0;
  std::uint64_t macs = 0;
  std::uint64_t flops = 0;
  double flops_ratio = 1.0;  // flops / flops at the first listed resolution
  double macs_ratio = 1.0;
};

std::vector<ScalingRow> scaling_report(const std::vector<ModelConfig>& models, const std::vector<Index>& resolutions);

enum class ReportFormat { Table, Csv };

ReportFormat parse_report_format(const std::string& text);
std::string format_report(const CostReport& report, ReportFormat format);
std::string format_scaling(const std::vector<ScalingRow>& rows, ReportFormat format);

}  // namespace hiri
