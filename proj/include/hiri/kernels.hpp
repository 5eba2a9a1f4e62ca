#pragma once

// Forward/backward numerical kernels over NdArray<Scalar>.
//
// Every forward kernel takes a counting policy. `NoCount` compiles away; an
// `OpCounter` receives one mac() per multiply-accumulate executed (zero-padding
// taps included) and one elem() per output element of every non-contraction
// kernel (bias adds, norms, activations, softmax, residual adds, pooling).
// Pure data movement (reshape, permute, upsample) counts nothing.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <type_traits>

#include "hiri/array.hpp"

namespace hiri {

struct NoCount {
  static constexpr bool enabled = false;
  void mac() {}
  void elem() {}
};

struct OpCounter {
  static constexpr bool enabled = true;
  std::uint64_t macs = 0;
  std::uint64_t elementwise = 0;
  void mac() { ++macs; }
  void elem() { ++elementwise; }
};

struct Conv2dOptions {
  Index stride_h = 1;
  Index stride_w = 1;
  Index pad_h = 0;
  Index pad_w = 0;
  Index groups = 1;

  static Conv2dOptions make(Index stride, Index pad, Index groups = 1) {
    return {stride, stride, pad, pad, groups};
  }
};

/// Fully resolved convolution extents.
struct ConvGeometry {
  Index batch, in_channels, in_h, in_w;
  Index out_channels, kernel_h, kernel_w;
  Index out_h, out_w;
  Conv2dOptions opts;

  Index in_per_group() const { return in_channels / opts.groups; }
  Index out_per_group() const { return out_channels / opts.groups; }
};

/// Validates input [N,Cin,H,W] against weight [Cout,Cin/g,kh,kw].
ConvGeometry conv_geometry(const Shape& input, const Shape& weight, const Conv2dOptions& opts);

/// Output extent of a strided window: floor((in + 2p - k)/s) + 1.
inline Index conv_out_extent(Index in, Index kernel, Index stride, Index pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

namespace kernels {

template <typename S>
constexpr bool kFastPath = std::is_floating_point_v<S>;

// ---------------------------------------------------------------- conv2d

template <typename S>
void im2col(const S* image, const ConvGeometry& g, S* cols) {
  const Index plane = g.out_h * g.out_w;
  for (Index c = 0; c < g.in_channels; ++c) {
    for (Index ki = 0; ki < g.kernel_h; ++ki) {
      for (Index kj = 0; kj < g.kernel_w; ++kj) {
        S* row = cols + ((c * g.kernel_h + ki) * g.kernel_w + kj) * plane;
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.opts.stride_h - g.opts.pad_h + ki;
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.opts.stride_w - g.opts.pad_w + kj;
            const bool inside = ih >= 0 && ih < g.in_h && iw >= 0 && iw < g.in_w;
            row[oh * g.out_w + ow] = inside ? image[(c * g.in_h + ih) * g.in_w + iw] : S(0);
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_add(const S* cols, const ConvGeometry& g, S* image) {
  const Index plane = g.out_h * g.out_w;
  for (Index c = 0; c < g.in_channels; ++c) {
    for (Index ki = 0; ki < g.kernel_h; ++ki) {
      for (Index kj = 0; kj < g.kernel_w; ++kj) {
        const S* row = cols + ((c * g.kernel_h + ki) * g.kernel_w + kj) * plane;
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.opts.stride_h - g.opts.pad_h + ki;
          if (ih < 0 || ih >= g.in_h) continue;
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.opts.stride_w - g.opts.pad_w + kj;
            if (iw < 0 || iw >= g.in_w) continue;
            image[(c * g.in_h + ih) * g.in_w + iw] += row[oh * g.out_w + ow];
          }
        }
      }
    }
  }
}

template <typename S, typename Count>
NdArray<S> conv2d_forward(const NdArray<S>& x, const NdArray<S>& w, const NdArray<S>* bias,
                          const ConvGeometry& g, Count& count) {
  NdArray<S> y({g.batch, g.out_channels, g.out_h, g.out_w});
  const Index plane = g.out_h * g.out_w;
  if constexpr (kFastPath<S> && !Count::enabled) {
    if (g.opts.groups == 1) {
      const Index k = g.in_channels * g.kernel_h * g.kernel_w;
      const auto weights = ConstMatrixMap<S>(w.data(), g.out_channels, k);
      RowMatrix<S> cols(k, plane);
      for (Index n = 0; n < g.batch; ++n) {
        const S* image = x.data() + n * g.in_channels * g.in_h * g.in_w;
        auto out = MatrixMap<S>(y.data() + n * g.out_channels * plane, g.out_channels, plane);
        im2col(image, g, cols.data());
        out.noalias() = weights * cols;
        if (bias != nullptr) {
          out.colwise() += ConstMatrixMap<S>(bias->data(), g.out_channels, 1).col(0);
        }
      }
      return y;
    }
  }
  const Index cin_g = g.in_per_group();
  const Index cout_g = g.out_per_group();
  for (Index n = 0; n < g.batch; ++n) {
    for (Index oc = 0; oc < g.out_channels; ++oc) {
      const Index first_in = (oc / cout_g) * cin_g;
      for (Index oh = 0; oh < g.out_h; ++oh) {
        for (Index ow = 0; ow < g.out_w; ++ow) {
          S acc(0);
          for (Index ic = 0; ic < cin_g; ++ic) {
            for (Index ki = 0; ki < g.kernel_h; ++ki) {
              const Index ih = oh * g.opts.stride_h - g.opts.pad_h + ki;
              for (Index kj = 0; kj < g.kernel_w; ++kj) {
                count.mac();
                const Index iw = ow * g.opts.stride_w - g.opts.pad_w + kj;
                if (ih < 0 || ih >= g.in_h || iw < 0 || iw >= g.in_w) continue;
                acc += x.at(n, first_in + ic, ih, iw) * w.at(oc, ic, ki, kj);
              }
            }
          }
          if (bias != nullptr) {
            acc += (*bias)[oc];
            count.elem();
          }
          y.at(n, oc, oh, ow) = acc;
        }
      }
    }
  }
  return y;
}

/// Accumulates input/weight/bias gradients; any output pointer may be null.
template <typename S>
void conv2d_backward(const NdArray<S>& x, const NdArray<S>& w, const NdArray<S>& gy,
                     const ConvGeometry& g, NdArray<S>* gx, NdArray<S>* gw, NdArray<S>* gb) {
  const Index plane = g.out_h * g.out_w;
  if (gb != nullptr) {
    for (Index n = 0; n < g.batch; ++n) {
      for (Index oc = 0; oc < g.out_channels; ++oc) {
        const S* row = gy.data() + (n * g.out_channels + oc) * plane;
        S sum(0);
        for (Index p = 0; p < plane; ++p) sum += row[p];
        (*gb)[oc] += sum;
      }
    }
  }
  if constexpr (kFastPath<S>) {
    if (g.opts.groups == 1) {
      const Index k = g.in_channels * g.kernel_h * g.kernel_w;
      const auto weights = ConstMatrixMap<S>(w.data(), g.out_channels, k);
      RowMatrix<S> cols(k, plane);
      RowMatrix<S> dcols(k, plane);
      for (Index n = 0; n < g.batch; ++n) {
        const auto grad_out =
            ConstMatrixMap<S>(gy.data() + n * g.out_channels * plane, g.out_channels, plane);
        if (gw != nullptr) {
          im2col(x.data() + n * g.in_channels * g.in_h * g.in_w, g, cols.data());
          MatrixMap<S>(gw->data(), g.out_channels, k).noalias() += grad_out * cols.transpose();
        }
        if (gx != nullptr) {
          dcols.noalias() = weights.transpose() * grad_out;
          col2im_add(dcols.data(), g, gx->data() + n * g.in_channels * g.in_h * g.in_w);
        }
      }
      return;
    }
  }
  const Index cin_g = g.in_per_group();
  const Index cout_g = g.out_per_group();
  for (Index n = 0; n < g.batch; ++n) {
    for (Index oc = 0; oc < g.out_channels; ++oc) {
      const Index first_in = (oc / cout_g) * cin_g;
      for (Index oh = 0; oh < g.out_h; ++oh) {
        for (Index ow = 0; ow < g.out_w; ++ow) {
          const S go = gy.at(n, oc, oh, ow);
          for (Index ic = 0; ic < cin_g; ++ic) {
            for (Index ki = 0; ki < g.kernel_h; ++ki) {
              const Index ih = oh * g.opts.stride_h - g.opts.pad_h + ki;
              if (ih < 0 || ih >= g.in_h) continue;
              for (Index kj = 0; kj < g.kernel_w; ++kj) {
                const Index iw = ow * g.opts.stride_w - g.opts.pad_w + kj;
                if (iw < 0 || iw >= g.in_w) continue;
                if (gx != nullptr) gx->at(n, first_in + ic, ih, iw) += go * w.at(oc, ic, ki, kj);
                if (gw != nullptr) gw->at(oc, ic, ki, kj) += go * x.at(n, first_in + ic, ih, iw);
              }
            }
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------- matmul

/// Batch layout of a broadcasting [..., m, k] x [..., k, p] product.
struct MatmulLayout {
  Shape batch_shape;
  std::vector<Index> a_offsets;  // per output batch entry, offset in matrices
  std::vector<Index> b_offsets;
  Index m, k, p;
};

MatmulLayout matmul_layout(const Shape& a, const Shape& b);

template <typename S, typename Count>
NdArray<S> matmul_forward(const NdArray<S>& a, const NdArray<S>& b, const MatmulLayout& layout,
                          Count& count) {
  Shape out_shape = layout.batch_shape;
  out_shape.push_back(layout.m);
  out_shape.push_back(layout.p);
  NdArray<S> y(out_shape);
  const Index am = layout.m * layout.k;
  const Index bm = layout.k * layout.p;
  const Index ym = layout.m * layout.p;
  for (std::size_t t = 0; t < layout.a_offsets.size(); ++t) {
    const S* pa = a.data() + layout.a_offsets[t] * am;
    const S* pb = b.data() + layout.b_offsets[t] * bm;
    S* py = y.data() + static_cast<Index>(t) * ym;
    if constexpr (kFastPath<S> && !Count::enabled) {
      MatrixMap<S>(py, layout.m, layout.p).noalias() =
          ConstMatrixMap<S>(pa, layout.m, layout.k) * ConstMatrixMap<S>(pb, layout.k, layout.p);
    } else {
      for (Index i = 0; i < layout.m; ++i) {
        for (Index j = 0; j < layout.p; ++j) {
          S acc(0);
          for (Index q = 0; q < layout.k; ++q) {
            count.mac();
            acc += pa[i * layout.k + q] * pb[q * layout.p + j];
          }
          py[i * layout.p + j] = acc;
        }
      }
    }
  }
  return y;
}

template <typename S>
void matmul_backward(const NdArray<S>& a, const NdArray<S>& b, const NdArray<S>& gy,
                     const MatmulLayout& layout, NdArray<S>* ga, NdArray<S>* gb) {
  const Index am = layout.m * layout.k;
  const Index bm = layout.k * layout.p;
  const Index ym = layout.m * layout.p;
  for (std::size_t t = 0; t < layout.a_offsets.size(); ++t) {
    const auto grad = ConstMatrixMap<S>(gy.data() + static_cast<Index>(t) * ym, layout.m, layout.p);
    if (ga != nullptr) {
      MatrixMap<S>(ga->data() + layout.a_offsets[t] * am, layout.m, layout.k).noalias() +=
          grad * ConstMatrixMap<S>(b.data() + layout.b_offsets[t] * bm, layout.k, layout.p).transpose();
    }
    if (gb != nullptr) {
      MatrixMap<S>(gb->data() + layout.b_offsets[t] * bm, layout.k, layout.p).noalias() +=
          ConstMatrixMap<S>(a.data() + layout.a_offsets[t] * am, layout.m, layout.k).transpose() * grad;
    }
  }
}

// ---------------------------------------------------------------- linear

/// y = x W^T + b over the last axis of x.
template <typename S, typename Count>
NdArray<S> linear_forward(const NdArray<S>& x, const NdArray<S>& w, const NdArray<S>* bias,
                          Count& count) {
  const Index d_in = w.dim(1);
  const Index d_out = w.dim(0);
  const Index rows = x.size() / d_in;
  Shape out_shape = x.shape();
  out_shape.back() = d_out;
  NdArray<S> y(out_shape);
  if constexpr (kFastPath<S> && !Count::enabled) {
    auto out = y.matrix(rows, d_out);
    out.noalias() = x.matrix(rows, d_in) * w.matrix(d_out, d_in).transpose();
    if (bias != nullptr) out.rowwise() += bias->matrix(1, d_out).row(0);
  } else {
    for (Index r = 0; r < rows; ++r) {
      for (Index o = 0; o < d_out; ++o) {
        S acc(0);
        for (Index i = 0; i < d_in; ++i) {
          count.mac();
          acc += x[r * d_in + i] * w[o * d_in + i];
        }
        if (bias != nullptr) {
          acc += (*bias)[o];
          count.elem();
        }
        y[r * d_out + o] = acc;
      }
    }
  }
  return y;
}

template <typename S>
void linear_backward(const NdArray<S>& x, const NdArray<S>& w, const NdArray<S>& gy, NdArray<S>* gx,
                     NdArray<S>* gw, NdArray<S>* gb) {
  const Index d_in = w.dim(1);
  const Index d_out = w.dim(0);
  const Index rows = x.size() / d_in;
  const auto grad = gy.matrix(rows, d_out);
  if (gx != nullptr) gx->matrix(rows, d_in).noalias() += grad * w.matrix(d_out, d_in);
  if (gw != nullptr) gw->matrix(d_out, d_in).noalias() += grad.transpose() * x.matrix(rows, d_in);
  if (gb != nullptr) gb->matrix(1, d_out).noalias() += grad.colwise().sum();
}

// ---------------------------------------------------------------- softmax

/// Splits `shape` around `axis` into (outer, extent, inner).
inline std::tuple<Index, Index, Index> split_axis(const Shape& shape, int axis) {
  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) inner *= shape[i];
  return {outer, shape[static_cast<std::size_t>(axis)], inner};
}

template <typename S, typename Count>
NdArray<S> softmax_forward(const NdArray<S>& x, int axis, Count& count) {
  const auto [outer, extent, inner] = split_axis(x.shape(), axis);
  NdArray<S> y(x.shape());
  for (Index o = 0; o < outer; ++o) {
    for (Index i = 0; i < inner; ++i) {
      const Index base = o * extent * inner + i;
      S peak = x[base];
      for (Index e = 1; e < extent; ++e) peak = std::max(peak, x[base + e * inner]);
      S total(0);
      for (Index e = 0; e < extent; ++e) {
        const S v = std::exp(x[base + e * inner] - peak);
        y[base + e * inner] = v;
        total += v;
      }
      for (Index e = 0; e < extent; ++e) {
        y[base + e * inner] /= total;
        count.elem();
      }
    }
  }
  return y;
}

template <typename S>
void softmax_backward(const NdArray<S>& y, const NdArray<S>& gy, int axis, NdArray<S>& gx) {
  const auto [outer, extent, inner] = split_axis(y.shape(), axis);
  for (Index o = 0; o < outer; ++o) {
    for (Index i = 0; i < inner; ++i) {
      const Index base = o * extent * inner + i;
      S dot(0);
      for (Index e = 0; e < extent; ++e) dot += gy[base + e * inner] * y[base + e * inner];
      for (Index e = 0; e < extent; ++e) {
        gx[base + e * inner] += y[base + e * inner] * (gy[base + e * inner] - dot);
      }
    }
  }
}

// ---------------------------------------------------------------- normalization

/// Normalized values and per-group inverse std saved for the backward pass.
template <typename S>
struct NormCache {
  NdArray<S> normalized;
  std::vector<S> inv_std;
  std::vector<S> mean;
  std::vector<S> var;  // biased
};

/// Batch normalization over (N,H,W) per channel. `stats` supplies the
/// running mean/var in eval mode; in train mode batch statistics are used.
template <typename S, typename Count>
NdArray<S> batch_norm_forward(const NdArray<S>& x, const NdArray<S>& gamma, const NdArray<S>& beta,
                              const S* eval_mean, const S* eval_var, S epsilon,
                              NormCache<S>& cache, Count& count) {
  const Index n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  const Index m = n * plane;
  NdArray<S> y(x.shape());
  cache.normalized = NdArray<S>(x.shape());
  cache.inv_std.assign(static_cast<std::size_t>(c), S(0));
  cache.mean.assign(static_cast<std::size_t>(c), S(0));
  cache.var.assign(static_cast<std::size_t>(c), S(0));
  for (Index ch = 0; ch < c; ++ch) {
    S mean(0), var(0);
    if (eval_mean == nullptr) {
      for (Index b = 0; b < n; ++b) {
        const S* row = x.data() + (b * c + ch) * plane;
        for (Index p = 0; p < plane; ++p) mean += row[p];
      }
      mean /= static_cast<S>(m);
      for (Index b = 0; b < n; ++b) {
        const S* row = x.data() + (b * c + ch) * plane;
        for (Index p = 0; p < plane; ++p) var += (row[p] - mean) * (row[p] - mean);
      }
      var /= static_cast<S>(m);
    } else {
      mean = eval_mean[ch];
      var = eval_var[ch];
    }
    const S inv_std = S(1) / std::sqrt(var + epsilon);
    cache.mean[static_cast<std::size_t>(ch)] = mean;
    cache.var[static_cast<std::size_t>(ch)] = var;
    cache.inv_std[static_cast<std::size_t>(ch)] = inv_std;
    for (Index b = 0; b < n; ++b) {
      const Index off = (b * c + ch) * plane;
      for (Index p = 0; p < plane; ++p) {
        const S xhat = (x[off + p] - mean) * inv_std;
        cache.normalized[off + p] = xhat;
        y[off + p] = gamma[ch] * xhat + beta[ch];
        count.elem();
      }
    }
  }
  return y;
}

template <typename S>
void batch_norm_backward(const NdArray<S>& gy, const NdArray<S>& gamma, const NormCache<S>& cache,
                         bool batch_stats, NdArray<S>* gx, NdArray<S>* ggamma, NdArray<S>* gbeta) {
  const Index n = gy.dim(0), c = gy.dim(1), plane = gy.dim(2) * gy.dim(3);
  const S m = static_cast<S>(n * plane);
  for (Index ch = 0; ch < c; ++ch) {
    S sum_g(0), sum_gx(0);
    for (Index b = 0; b < n; ++b) {
      const Index off = (b * c + ch) * plane;
      for (Index p = 0; p < plane; ++p) {
        sum_g += gy[off + p];
        sum_gx += gy[off + p] * cache.normalized[off + p];
      }
    }
    if (ggamma != nullptr) (*ggamma)[ch] += sum_gx;
    if (gbeta != nullptr) (*gbeta)[ch] += sum_g;
    if (gx == nullptr) continue;
    const S scale = gamma[ch] * cache.inv_std[static_cast<std::size_t>(ch)];
    for (Index b = 0; b < n; ++b) {
      const Index off = (b * c + ch) * plane;
      for (Index p = 0; p < plane; ++p) {
        if (batch_stats) {
          (*gx)[off + p] += scale / m * (m * gy[off + p] - sum_g - cache.normalized[off + p] * sum_gx);
        } else {
          (*gx)[off + p] += scale * gy[off + p];
        }
      }
    }
  }
}

/// Layer normalization over the last axis.
template <typename S, typename Count>
NdArray<S> layer_norm_forward(const NdArray<S>& x, const NdArray<S>& gamma, const NdArray<S>& beta,
                              S epsilon, NormCache<S>& cache, Count& count) {
  const Index d = x.dim(-1);
  const Index rows = x.size() / d;
  NdArray<S> y(x.shape());
  cache.normalized = NdArray<S>(x.shape());
  cache.inv_std.assign(static_cast<std::size_t>(rows), S(0));
  for (Index r = 0; r < rows; ++r) {
    const S* row = x.data() + r * d;
    S mean(0), var(0);
    for (Index i = 0; i < d; ++i) mean += row[i];
    mean /= static_cast<S>(d);
    for (Index i = 0; i < d; ++i) var += (row[i] - mean) * (row[i] - mean);
    var /= static_cast<S>(d);
    const S inv_std = S(1) / std::sqrt(var + epsilon);
    cache.inv_std[static_cast<std::size_t>(r)] = inv_std;
    for (Index i = 0; i < d; ++i) {
      const S xhat = (row[i] - mean) * inv_std;
      cache.normalized[r * d + i] = xhat;
      y[r * d + i] = gamma[i] * xhat + beta[i];
      count.elem();
    }
  }
  return y;
}

template <typename S>
void layer_norm_backward(const NdArray<S>& gy, const NdArray<S>& gamma, const NormCache<S>& cache,
                         NdArray<S>* gx, NdArray<S>* ggamma, NdArray<S>* gbeta) {
  const Index d = gy.dim(-1);
  const Index rows = gy.size() / d;
  for (Index r = 0; r < rows; ++r) {
    S sum_g(0), sum_gx(0);
    for (Index i = 0; i < d; ++i) {
      const S g = gy[r * d + i] * gamma[i];
      sum_g += g;
      sum_gx += g * cache.normalized[r * d + i];
      if (ggamma != nullptr) (*ggamma)[i] += gy[r * d + i] * cache.normalized[r * d + i];
      if (gbeta != nullptr) (*gbeta)[i] += gy[r * d + i];
    }
    if (gx == nullptr) continue;
    const S inv_std = cache.inv_std[static_cast<std::size_t>(r)];
    const S dd = static_cast<S>(d);
    for (Index i = 0; i < d; ++i) {
      const S g = gy[r * d + i] * gamma[i];
      (*gx)[r * d + i] += inv_std / dd * (dd * g - sum_g - cache.normalized[r * d + i] * sum_gx);
    }
  }
}

// ---------------------------------------------------------------- activations

template <typename S>
S gelu_value(S x) {
  return S(0.5) * x * (S(1) + std::erf(x / std::numbers::sqrt2_v<S>));
}

template <typename S>
S gelu_derivative(S x) {
  const S cdf = S(0.5) * (S(1) + std::erf(x / std::numbers::sqrt2_v<S>));
  const S pdf = std::exp(S(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<S> / std::numbers::sqrt2_v<S>;
  return cdf + x * pdf;
}

template <typename S, typename Count>
NdArray<S> gelu_forward(const NdArray<S>& x, Count& count) {
  NdArray<S> y(x.shape());
  for (Index i = 0; i < x.size(); ++i) {
    y[i] = gelu_value(x[i]);
    count.elem();
  }
  return y;
}

// ---------------------------------------------------------------- resampling

template <typename S>
NdArray<S> upsample_repeat_forward(const NdArray<S>& x, Index factor) {
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  NdArray<S> y({n, c, h * factor, w * factor});
  for (Index b = 0; b < n; ++b)
    for (Index ch = 0; ch < c; ++ch)
      for (Index i = 0; i < h * factor; ++i)
        for (Index j = 0; j < w * factor; ++j) y.at(b, ch, i, j) = x.at(b, ch, i / factor, j / factor);
  return y;
}

template <typename S>
void upsample_repeat_backward(const NdArray<S>& gy, Index factor, NdArray<S>& gx) {
  for (Index b = 0; b < gy.dim(0); ++b)
    for (Index ch = 0; ch < gy.dim(1); ++ch)
      for (Index i = 0; i < gy.dim(2); ++i)
        for (Index j = 0; j < gy.dim(3); ++j) gx.at(b, ch, i / factor, j / factor) += gy.at(b, ch, i, j);
}

template <typename S, typename Count>
NdArray<S> global_avg_pool_forward(const NdArray<S>& x, Count& count) {
  const Index n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  NdArray<S> y({n, c});
  for (Index i = 0; i < n * c; ++i) {
    S sum(0);
    for (Index p = 0; p < plane; ++p) sum += x[i * plane + p];
    y[i] = sum / static_cast<S>(plane);
    count.elem();
  }
  return y;
}

/// 2x2 stride-2 average pooling in ceil mode; edge windows average only
/// their in-bounds cells.
template <typename S, typename Count>
NdArray<S> avg_pool2x2_forward(const NdArray<S>& x, Count& count) {
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index oh = (h + 1) / 2, ow = (w + 1) / 2;
  NdArray<S> y({n, c, oh, ow});
  for (Index b = 0; b < n; ++b)
    for (Index ch = 0; ch < c; ++ch)
      for (Index i = 0; i < oh; ++i)
        for (Index j = 0; j < ow; ++j) {
          S sum(0);
          Index cells = 0;
          for (Index di = 0; di < 2; ++di)
            for (Index dj = 0; dj < 2; ++dj) {
              const Index ih = 2 * i + di, iw = 2 * j + dj;
              if (ih < h && iw < w) {
                sum += x.at(b, ch, ih, iw);
                ++cells;
              }
            }
          y.at(b, ch, i, j) = sum / static_cast<S>(cells);
          count.elem();
        }
  return y;
}

template <typename S>
void avg_pool2x2_backward(const NdArray<S>& gy, const Shape& in_shape, NdArray<S>& gx) {
  const Index h = in_shape[2], w = in_shape[3];
  for (Index b = 0; b < gy.dim(0); ++b)
    for (Index ch = 0; ch < gy.dim(1); ++ch)
      for (Index i = 0; i < gy.dim(2); ++i)
        for (Index j = 0; j < gy.dim(3); ++j) {
          const Index rows = std::min<Index>(2, h - 2 * i), cols = std::min<Index>(2, w - 2 * j);
          const S share = gy.at(b, ch, i, j) / static_cast<S>(rows * cols);
          for (Index di = 0; di < rows; ++di)
            for (Index dj = 0; dj < cols; ++dj) gx.at(b, ch, 2 * i + di, 2 * j + dj) += share;
        }
}

// ---------------------------------------------------------------- layout

/// Strides of a row-major array with the given shape.
inline Shape row_major_strides(const Shape& shape) {
  Shape strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

/// out[..] = x[permuted ..]; out.shape[i] = x.shape[perm[i]].
template <typename S>
NdArray<S> permute(const NdArray<S>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  Shape out_shape(static_cast<std::size_t>(r));
  const Shape in_strides = row_major_strides(x.shape());
  Shape gather(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    out_shape[static_cast<std::size_t>(i)] = x.shape()[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    gather[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  NdArray<S> y(out_shape);
  std::vector<Index> idx(static_cast<std::size_t>(r), 0);
  Index src = 0;
  for (Index flat = 0; flat < y.size(); ++flat) {
    y[flat] = x[src];
    for (int a = r - 1; a >= 0; --a) {
      const auto ua = static_cast<std::size_t>(a);
      ++idx[ua];
      src += gather[ua];
      if (idx[ua] < out_shape[ua]) break;
      src -= gather[ua] * idx[ua];
      idx[ua] = 0;
    }
  }
  return y;
}

inline std::vector<int> inverse_permutation(const std::vector<int>& perm) {
  std::vector<int> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
  return inv;
}

}  // namespace kernels
}  // namespace hiri
