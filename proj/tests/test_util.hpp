#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "mscrack/random.hpp"
#include "mscrack/tensor.hpp"

namespace testutil {

using mscrack::Rng;
using mscrack::Shape;
using mscrack::Tensor;

inline Tensor rand_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return mscrack::uniform_tensor(std::move(s), rng, lo, hi);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

inline double max_abs(const Tensor& a) {
  double m = 0;
  for (double v : a.data()) m = std::max(m, std::fabs(v));
  return m;
}

// Norm-wise relative difference: max|a-b| / max|b|.
inline double rel_diff(const Tensor& a, const Tensor& ref) {
  const double scale = max_abs(ref);
  return max_abs_diff(a, ref) / (scale > 0 ? scale : 1.0);
}

// Separable Gaussian blur of a [C,H,W] tensor with clamp-to-edge borders.
inline Tensor gaussian_blur(const Tensor& x, double sigma) {
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * radius + 1);
  double s = 0;
  for (int i = -radius; i <= radius; ++i) s += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= s;
  const int c = static_cast<int>(x.dim(0)), h = static_cast<int>(x.dim(1)), w = static_cast<int>(x.dim(2));
  Tensor tmp(x.shape()), out(x.shape());
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * x.at(ch, y, std::clamp(xx + i, 0, w - 1));
        tmp.at(ch, y, xx) = acc;
      }
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp.at(ch, std::clamp(y + i, 0, h - 1), xx);
        out.at(ch, y, xx) = acc;
      }
  return out;
}

}  // namespace testutil
