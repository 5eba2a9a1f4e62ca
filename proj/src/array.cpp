#include "hiri/array.hpp"

#include <sstream>

#include "hiri/kernels.hpp"

namespace hiri {

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

ConvGeometry conv_geometry(const Shape& input, const Shape& weight, const Conv2dOptions& opts) {
  if (input.size() != 4 || weight.size() != 4) {
    throw DimensionError("conv2d expects input [N,C,H,W] and weight [Cout,Cin/g,kh,kw], got " +
                         shape_string(input) + " and " + shape_string(weight));
  }
  if (opts.groups < 1 || opts.stride_h < 1 || opts.stride_w < 1 || opts.pad_h < 0 || opts.pad_w < 0) {
    throw ConfigError("conv2d: groups and strides must be >= 1, paddings >= 0");
  }
  ConvGeometry g{};
  g.batch = input[0];
  g.in_channels = input[1];
  g.in_h = input[2];
  g.in_w = input[3];
  g.out_channels = weight[0];
  g.kernel_h = weight[2];
  g.kernel_w = weight[3];
  g.opts = opts;
  if (g.in_channels % opts.groups != 0) {
    throw DimensionError("conv2d: input channels (axis 1 of " + shape_string(input) + ") not divisible by groups " +
                         std::to_string(opts.groups));
  }
  if (g.out_channels % opts.groups != 0) {
    throw DimensionError("conv2d: output channels (axis 0 of " + shape_string(weight) +
                         ") not divisible by groups " + std::to_string(opts.groups));
  }
  if (weight[1] != g.in_channels / opts.groups) {
    throw DimensionError("conv2d: weight axis 1 is " + std::to_string(weight[1]) + ", expected Cin/groups = " +
                         std::to_string(g.in_channels / opts.groups));
  }
  g.out_h = conv_out_extent(g.in_h, g.kernel_h, opts.stride_h, opts.pad_h);
  g.out_w = conv_out_extent(g.in_w, g.kernel_w, opts.stride_w, opts.pad_w);
  if (g.in_h + 2 * opts.pad_h < g.kernel_h || g.in_w + 2 * opts.pad_w < g.kernel_w || g.out_h < 1 || g.out_w < 1) {
    throw ResolutionError("conv2d: input " + shape_string(input) + " too small for kernel " + shape_string(weight) +
                          " (output would be " + std::to_string(g.out_h) + "x" + std::to_string(g.out_w) + ")");
  }
  return g;
}

namespace kernels {

MatmulLayout matmul_layout(const Shape& a, const Shape& b) {
  if (a.size() < 2 || b.size() < 2) {
    throw DimensionError("matmul needs rank >= 2 operands, got " + shape_string(a) + " and " + shape_string(b));
  }
  MatmulLayout layout;
  layout.m = a[a.size() - 2];
  layout.k = a[a.size() - 1];
  layout.p = b[b.size() - 1];
  if (b[b.size() - 2] != layout.k) {
    throw DimensionError("matmul inner extents differ: " + shape_string(a) + " x " + shape_string(b));
  }
  const Shape a_batch(a.begin(), a.end() - 2);
  const Shape b_batch(b.begin(), b.end() - 2);
  const std::size_t rank = std::max(a_batch.size(), b_batch.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a_batch.begin(), a_batch.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - a_batch.size()));
  std::copy(b_batch.begin(), b_batch.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - b_batch.size()));
  layout.batch_shape.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw DimensionError("matmul batch axes not broadcastable: " + shape_string(a) + " x " + shape_string(b));
    }
    layout.batch_shape[i] = std::max(pa[i], pb[i]);
  }
  const Index total = numel(layout.batch_shape);
  const Shape sa = row_major_strides(pa), sb = row_major_strides(pb);
  layout.a_offsets.resize(static_cast<std::size_t>(total));
  layout.b_offsets.resize(static_cast<std::size_t>(total));
  std::vector<Index> idx(rank, 0);
  for (Index t = 0; t < total; ++t) {
    Index oa = 0, ob = 0;
    for (std::size_t i = 0; i < rank; ++i) {
      if (pa[i] != 1) oa += idx[i] * sa[i];
      if (pb[i] != 1) ob += idx[i] * sb[i];
    }
    layout.a_offsets[static_cast<std::size_t>(t)] = oa;
    layout.b_offsets[static_cast<std::size_t>(t)] = ob;
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < layout.batch_shape[i]) break;
      idx[i] = 0;
    }
  }
  return layout;
}

}  // namespace kernels
}  // namespace hiri
