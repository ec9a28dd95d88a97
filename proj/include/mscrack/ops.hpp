#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mscrack/tensor.hpp"

// Differentiable building blocks. Every forward op has a matching *_vjp that
// maps an upstream cotangent (same shape as the forward output) to
// cotangents of the inputs.

namespace mscrack {

double sigmoid(double x);
double softplus(double x);

Tensor silu(const Tensor& x);
Tensor silu_vjp(const Tensor& x, const Tensor& gy);

Tensor relu(const Tensor& x);
Tensor relu_vjp(const Tensor& x, const Tensor& gy);

// Normalizes over the last axis.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
struct LayerNormGrads {
  Tensor dx, dgamma, dbeta;
};
LayerNormGrads layer_norm_vjp(const Tensor& x, const Tensor& gamma, double eps, const Tensor& gy);

// y = x W + b over the last axis. W is [in, out]; b is [out] or empty (no bias).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
struct LinearGrads {
  Tensor dx, dw, db;
};
LinearGrads linear_vjp(const Tensor& x, const Tensor& w, const Tensor& gy);

// x [C,H,W], k [C,kh,kw] (odd extents), zero "same" padding, cross-correlation.
Tensor depthwise_conv2d(const Tensor& x, const Tensor& k);
struct DepthwiseGrads {
  Tensor dx, dk;
};
DepthwiseGrads depthwise_conv2d_vjp(const Tensor& x, const Tensor& k, const Tensor& gy);

// x [Cin,H,W], w [Cout,Cin,kh,kw], b [Cout] or empty; zero "same" padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b);
struct ConvGrads {
  Tensor dx, dw, db;
};
ConvGrads conv2d_vjp(const Tensor& x, const Tensor& w, const Tensor& gy);

// Separable resampling of [C,H,W] with half-pixel centers.
// Bicubic uses the a = -0.5 kernel with clamp-to-edge taps.
Tensor resize_bicubic(const Tensor& x, std::size_t out_h, std::size_t out_w);
Tensor resize_bicubic_vjp(const Tensor& gy, std::size_t in_h, std::size_t in_w);
Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w);
Tensor resize_bilinear_vjp(const Tensor& gy, std::size_t in_h, std::size_t in_w);
// Works on [H,W] or [C,H,W]; used for label maps.
Tensor resize_nearest(const Tensor& x, std::size_t out_h, std::size_t out_w);

// [C,H,W] -> [C,bins,bins] with adaptive (overlapping when bins > H) windows.
Tensor adaptive_avg_pool2d(const Tensor& x, std::size_t bins);
Tensor adaptive_avg_pool2d_vjp(const Tensor& gy, std::size_t in_h, std::size_t in_w);

Tensor hwc_to_chw(const Tensor& x);
Tensor chw_to_hwc(const Tensor& x);

// Concatenate / split along axis 0 of [C,H,W] tensors.
Tensor concat_channels(std::span<const Tensor> parts);
std::vector<Tensor> split_channels(const Tensor& x, std::span<const std::size_t> sizes);

Tensor clamp(const Tensor& x, double lo, double hi);

}  // namespace mscrack
