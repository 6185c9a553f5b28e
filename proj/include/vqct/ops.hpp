#pragma once

// Forward and backward kernels for the differentiable primitives used by the
// encoder/decoder. All kernels operate on single samples laid out as
// [C, (D,) H, W]; rank-2 spatial inputs are handled as D == 1.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <vector>

#include "vqct/tensor.hpp"

namespace vqct {

namespace detail {

struct ConvGeometry {
  std::size_t c_in = 0, c_out = 0;
  std::size_t d = 1, h = 1, w = 1;     // input spatial
  std::size_t kd = 1, kh = 1, kw = 1;  // kernel
  std::size_t od = 1, oh = 1, ow = 1;  // output spatial
  std::ptrdiff_t pd = 0, ph = 0, pw = 0;
  std::ptrdiff_t sd = 1, sh = 1, sw = 1;
  std::size_t spatial_rank = 2;
};

inline std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  const auto padded = static_cast<std::ptrdiff_t>(in + 2 * pad);
  const auto span = padded - static_cast<std::ptrdiff_t>(k);
  if (span < 0)
    throw DomainError("convolution window " + std::to_string(k) + " exceeds padded extent " +
                      std::to_string(padded));
  return static_cast<std::size_t>(span) / stride + 1;
}

inline ConvGeometry conv_geometry(const Shape& input, const Shape& kernel, std::size_t stride,
                                  std::size_t pad) {
  if (input.size() != 3 && input.size() != 4)
    throw ShapeError("convolution input must be [C,H,W] or [C,D,H,W], got " + shape_str(input));
  if (kernel.size() != input.size() + 1)
    throw ShapeError("kernel rank does not match input: " + shape_str(kernel) + " vs " +
                     shape_str(input));
  if (kernel[1] != input[0])
    throw ShapeError("kernel expects " + std::to_string(kernel[1]) + " input channels, input has " +
                     std::to_string(input[0]));
  if (stride != 1 && stride != 2) throw DomainError("stride must be 1 or 2");
  for (std::size_t a = 2; a < kernel.size(); ++a) {
    const auto k = kernel[a];
    if (k % 2 == 0 && k != 2) throw DomainError("kernel extent must be odd or 2");
  }

  ConvGeometry g;
  g.spatial_rank = input.size() - 1;
  g.c_in = input[0];
  g.c_out = kernel[0];
  const auto s = static_cast<std::ptrdiff_t>(stride);
  const auto p = static_cast<std::ptrdiff_t>(pad);
  if (g.spatial_rank == 3) {
    g.d = input[1];
    g.kd = kernel[2];
    g.pd = p;
    g.sd = s;
  }
  g.h = input[input.size() - 2];
  g.w = input[input.size() - 1];
  g.kh = kernel[kernel.size() - 2];
  g.kw = kernel[kernel.size() - 1];
  g.ph = g.pw = p;
  g.sh = g.sw = s;
  g.od = conv_extent(g.d, g.kd, static_cast<std::size_t>(g.sd), static_cast<std::size_t>(g.pd));
  g.oh = conv_extent(g.h, g.kh, stride, pad);
  g.ow = conv_extent(g.w, g.kw, stride, pad);
  return g;
}

inline Shape conv_output_shape(const ConvGeometry& g) {
  if (g.spatial_rank == 3) return {g.c_out, g.od, g.oh, g.ow};
  return {g.c_out, g.oh, g.ow};
}

// Output index range [lo, hi) whose input coordinate o*s + k - p lands in [0, n).
inline std::pair<std::ptrdiff_t, std::ptrdiff_t> valid_range(std::size_t out_extent, std::size_t n,
                                                             std::ptrdiff_t k, std::ptrdiff_t s,
                                                             std::ptrdiff_t p) {
  std::ptrdiff_t lo = 0;
  while (lo < static_cast<std::ptrdiff_t>(out_extent) && lo * s + k - p < 0) ++lo;
  std::ptrdiff_t hi = static_cast<std::ptrdiff_t>(out_extent);
  while (hi > lo && (hi - 1) * s + k - p >= static_cast<std::ptrdiff_t>(n)) --hi;
  return {lo, hi};
}

// Visits every (output position, input position) pair of one kernel tap as
// contiguous-ish rows: fn(out_row_offset, in_row_offset, ow_lo, ow_hi).
template <typename Fn>
void for_each_tap_row(const ConvGeometry& g, std::size_t kd, std::size_t kh, std::size_t kw, Fn&& fn) {
  const auto [d_lo, d_hi] = valid_range(g.od, g.d, static_cast<std::ptrdiff_t>(kd), g.sd, g.pd);
  const auto [h_lo, h_hi] = valid_range(g.oh, g.h, static_cast<std::ptrdiff_t>(kh), g.sh, g.ph);
  const auto [w_lo, w_hi] = valid_range(g.ow, g.w, static_cast<std::ptrdiff_t>(kw), g.sw, g.pw);
  if (w_lo >= w_hi) return;
  for (std::ptrdiff_t od = d_lo; od < d_hi; ++od) {
    const auto id = static_cast<std::size_t>(od * g.sd + static_cast<std::ptrdiff_t>(kd) - g.pd);
    for (std::ptrdiff_t oh = h_lo; oh < h_hi; ++oh) {
      const auto ih = static_cast<std::size_t>(oh * g.sh + static_cast<std::ptrdiff_t>(kh) - g.ph);
      const std::size_t out_row = (static_cast<std::size_t>(od) * g.oh + static_cast<std::size_t>(oh)) * g.ow;
      const std::size_t in_row = (id * g.h + ih) * g.w;
      fn(out_row, in_row, w_lo, w_hi, static_cast<std::ptrdiff_t>(kw) - g.pw);
    }
  }
}

}  // namespace detail

struct ConvGrads {
  Tensor input;
  Tensor kernel;
  Tensor bias;  // [C_out]
};

// Direct-summation cross-correlation with zero padding.
inline Tensor conv_forward(const Tensor& input, const Tensor& kernel, const Tensor* bias,
                           std::size_t stride, std::size_t pad) {
  const auto g = detail::conv_geometry(input.shape(), kernel.shape(), stride, pad);
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.c_out))
    throw ShapeError("bias must have shape [" + std::to_string(g.c_out) + "]");
  Tensor out(detail::conv_output_shape(g));
  const std::size_t in_vol = g.d * g.h * g.w;
  const std::size_t out_vol = g.od * g.oh * g.ow;
  const std::size_t taps = g.kd * g.kh * g.kw;
  const double* x = input.values().data();
  const double* k = kernel.values().data();
  double* y = out.values().data();
  const auto sw = g.sw;

  for (std::size_t co = 0; co < g.c_out; ++co) {
    double* yc = y + co * out_vol;
    if (bias) std::fill(yc, yc + out_vol, (*bias)[co]);
    for (std::size_t ci = 0; ci < g.c_in; ++ci) {
      const double* xc = x + ci * in_vol;
      const double* kc = k + (co * g.c_in + ci) * taps;
      for (std::size_t kd = 0; kd < g.kd; ++kd)
        for (std::size_t kh = 0; kh < g.kh; ++kh)
          for (std::size_t kw = 0; kw < g.kw; ++kw) {
            const double wv = kc[(kd * g.kh + kh) * g.kw + kw];
            detail::for_each_tap_row(g, kd, kh, kw,
                                     [&](std::size_t orow, std::size_t irow, std::ptrdiff_t lo,
                                         std::ptrdiff_t hi, std::ptrdiff_t shift) {
                                       double* yr = yc + orow;
                                       const double* xr = xc + irow;
                                       for (std::ptrdiff_t o = lo; o < hi; ++o)
                                         yr[o] += wv * xr[o * sw + shift];
                                     });
          }
    }
  }
  return out;
}

// Gradients of conv_forward. Skips grad_input when need_input_grad is false.
inline ConvGrads conv_backward(const Tensor& input, const Tensor& kernel, std::size_t stride,
                               std::size_t pad, const Tensor& upstream, bool need_input_grad = true) {
  const auto g = detail::conv_geometry(input.shape(), kernel.shape(), stride, pad);
  if (upstream.shape() != detail::conv_output_shape(g))
    throw ShapeError("upstream gradient " + shape_str(upstream.shape()) + " does not match conv output " +
                     shape_str(detail::conv_output_shape(g)));
  ConvGrads grads{need_input_grad ? Tensor(input.shape()) : Tensor(), Tensor(kernel.shape()),
                  Tensor(Shape{g.c_out})};
  const std::size_t in_vol = g.d * g.h * g.w;
  const std::size_t out_vol = g.od * g.oh * g.ow;
  const std::size_t taps = g.kd * g.kh * g.kw;
  const double* x = input.values().data();
  const double* k = kernel.values().data();
  const double* gy = upstream.values().data();
  double* gx = need_input_grad ? grads.input.values().data() : nullptr;
  double* gk = grads.kernel.values().data();
  const auto sw = g.sw;

  for (std::size_t co = 0; co < g.c_out; ++co) {
    const double* gyc = gy + co * out_vol;
    double bsum = 0.0;
    for (std::size_t i = 0; i < out_vol; ++i) bsum += gyc[i];
    grads.bias[co] = bsum;
    for (std::size_t ci = 0; ci < g.c_in; ++ci) {
      const double* xc = x + ci * in_vol;
      const double* kc = k + (co * g.c_in + ci) * taps;
      double* gkc = gk + (co * g.c_in + ci) * taps;
      double* gxc = gx ? gx + ci * in_vol : nullptr;
      for (std::size_t kd = 0; kd < g.kd; ++kd)
        for (std::size_t kh = 0; kh < g.kh; ++kh)
          for (std::size_t kw = 0; kw < g.kw; ++kw) {
            const std::size_t tap = (kd * g.kh + kh) * g.kw + kw;
            const double wv = kc[tap];
            double acc = 0.0;
            detail::for_each_tap_row(g, kd, kh, kw,
                                     [&](std::size_t orow, std::size_t irow, std::ptrdiff_t lo,
                                         std::ptrdiff_t hi, std::ptrdiff_t shift) {
                                       const double* gr = gyc + orow;
                                       const double* xr = xc + irow;
                                       for (std::ptrdiff_t o = lo; o < hi; ++o) acc += gr[o] * xr[o * sw + shift];
                                       if (gxc) {
                                         double* gxr = gxc + irow;
                                         for (std::ptrdiff_t o = lo; o < hi; ++o) gxr[o * sw + shift] += wv * gr[o];
                                       }
                                     });
            gkc[tap] += acc;
          }
    }
  }
  return grads;
}

inline Tensor leaky_relu_forward(const Tensor& input, double slope) {
  if (!(slope >= 0.0 && slope < 1.0)) throw DomainError("leaky-relu slope must lie in [0, 1)");
  Tensor out = input;
  for (auto& v : out.values())
    if (v < 0.0) v *= slope;
  return out;
}

// x == 0 takes the positive branch.
inline Tensor leaky_relu_backward(const Tensor& input, double slope, const Tensor& upstream) {
  require_same_shape(input, upstream, "leaky_relu_backward");
  Tensor g = upstream;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (input[i] < 0.0) g[i] *= slope;
  return g;
}

inline Tensor upsample_nearest_forward(const Tensor& input, std::size_t factor) {
  if (factor < 1) throw DomainError("upsample factor must be >= 1");
  if (input.rank() != 3 && input.rank() != 4)
    throw ShapeError("upsample input must be [C,H,W] or [C,D,H,W]");
  if (factor == 1) return input;
  Shape out_shape = input.shape();
  for (std::size_t a = 1; a < out_shape.size(); ++a) out_shape[a] *= factor;
  Tensor out(out_shape);
  const bool vol = input.rank() == 4;
  const std::size_t c = input.dim(0);
  const std::size_t d = vol ? input.dim(1) : 1, h = input.dim(input.rank() - 2), w = input.dim(input.rank() - 1);
  const std::size_t fd = vol ? factor : 1;
  const std::size_t od = d * fd, oh = h * factor, ow = w * factor;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t z = 0; z < od; ++z)
      for (std::size_t y = 0; y < oh; ++y) {
        const double* src = input.raw().data() + (((ch * d + z / fd) * h + y / factor) * w);
        double* dst = &out[((ch * od + z) * oh + y) * ow];
        for (std::size_t x = 0; x < ow; ++x) dst[x] = src[x / factor];
      }
  return out;
}

inline Tensor upsample_nearest_backward(const Shape& input_shape, std::size_t factor, const Tensor& upstream) {
  if (factor == 1) return upstream;
  Tensor g(input_shape);
  const bool vol = input_shape.size() == 4;
  const std::size_t c = input_shape[0];
  const std::size_t d = vol ? input_shape[1] : 1, h = input_shape[input_shape.size() - 2],
                    w = input_shape[input_shape.size() - 1];
  const std::size_t fd = vol ? factor : 1;
  const std::size_t od = d * fd, oh = h * factor, ow = w * factor;
  if (upstream.size() != c * od * oh * ow) throw ShapeError("upsample upstream gradient has wrong size");
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t z = 0; z < od; ++z)
      for (std::size_t y = 0; y < oh; ++y) {
        double* dst = &g[((ch * d + z / fd) * h + y / factor) * w];
        const double* src = upstream.raw().data() + ((ch * od + z) * oh + y) * ow;
        for (std::size_t x = 0; x < ow; ++x) dst[x / factor] += src[x];
      }
  return g;
}

// Per-position L2 normalization across the channel axis. Zero vectors map to
// the first basis vector; their positions are reported in `degenerate`.
struct ChannelNormResult {
  Tensor output;
  std::vector<double> norms;  // one per spatial position
  std::vector<std::size_t> degenerate;
};

inline ChannelNormResult l2_normalize_channels(const Tensor& input) {
  if (input.rank() < 2) throw ShapeError("channel normalization needs [C, spatial...]");
  const std::size_t c = input.dim(0);
  const std::size_t n = input.size() / c;
  ChannelNormResult r{Tensor(input.shape()), std::vector<double>(n, 0.0), {}};
  for (std::size_t p = 0; p < n; ++p) {
    double ss = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) ss += input[ch * n + p] * input[ch * n + p];
    const double norm = std::sqrt(ss);
    r.norms[p] = norm;
    if (norm == 0.0) {
      r.output[p] = 1.0;
      r.degenerate.push_back(p);
      continue;
    }
    for (std::size_t ch = 0; ch < c; ++ch) r.output[ch * n + p] = input[ch * n + p] / norm;
  }
  return r;
}

// d(x/|x|)/dx applied to upstream: (g - y <y,g>) / |x|. Degenerate positions get zero.
inline Tensor l2_normalize_channels_backward(const ChannelNormResult& fwd, const Tensor& upstream) {
  require_same_shape(fwd.output, upstream, "l2_normalize_channels_backward");
  const std::size_t c = upstream.dim(0);
  const std::size_t n = upstream.size() / c;
  Tensor g(upstream.shape());
  for (std::size_t p = 0; p < n; ++p) {
    const double norm = fwd.norms[p];
    if (norm == 0.0) continue;
    double dot = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) dot += fwd.output[ch * n + p] * upstream[ch * n + p];
    for (std::size_t ch = 0; ch < c; ++ch)
      g[ch * n + p] = (upstream[ch * n + p] - fwd.output[ch * n + p] * dot) / norm;
  }
  return g;
}

}  // namespace vqct
