#include "mscrack/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include <cblas.h>

namespace mscrack {

double sigmoid(double x) {
  if (x >= 0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) {
  if (x > 30.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

Tensor silu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * sigmoid(x[i]);
  return y;
}

Tensor silu_vjp(const Tensor& x, const Tensor& gy) {
  require_shape(gy, x.shape(), "silu_vjp");
  Tensor dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double s = sigmoid(x[i]);
    dx[i] = gy[i] * s * (1.0 + x[i] * (1.0 - s));
  }
  return dx;
}

Tensor relu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0 ? x[i] : 0.0;
  return y;
}

Tensor relu_vjp(const Tensor& x, const Tensor& gy) {
  require_shape(gy, x.shape(), "relu_vjp");
  Tensor dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0 ? gy[i] : 0.0;
  return dx;
}

namespace {

// Row-major c[m,n] = op(a) * op(b) + beta * c.
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const double* a,
          const double* b, double beta, double* c) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    for (std::size_t i = 0; i < m * n; ++i) c[i] *= beta;
    return;
  }
  const auto im = static_cast<int>(m), in = static_cast<int>(n), ik = static_cast<int>(k);
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, im,
              in, ik, 1.0, a, ta ? im : ik, b, tb ? ik : in, beta, c, in);
}

std::size_t last_axis(const Tensor& x, const char* what) {
  if (x.rank() == 0 || x.shape().back() == 0) {
    throw ShapeError(std::string(what) + ": last axis extent is 0 in " + shape_str(x.shape()));
  }
  return x.shape().back();
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = last_axis(x, "layer_norm");
  require_shape(gamma, {d}, "layer_norm gamma");
  require_shape(beta, {d}, "layer_norm beta");
  Tensor y(x.shape());
  const std::size_t rows = x.size() / d;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.ptr() + r * d;
    double* yr = y.ptr() + r * d;
    double mean = 0;
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<double>(d);
    double var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) yr[i] = (xr[i] - mean) * rstd * gamma[i] + beta[i];
  }
  return y;
}

LayerNormGrads layer_norm_vjp(const Tensor& x, const Tensor& gamma, double eps, const Tensor& gy) {
  const std::size_t d = last_axis(x, "layer_norm_vjp");
  require_shape(gy, x.shape(), "layer_norm_vjp upstream");
  LayerNormGrads g{Tensor(x.shape()), Tensor({d}), Tensor({d})};
  const std::size_t rows = x.size() / d;
  std::vector<double> xhat(d), dxhat(d);
  const double inv_d = 1.0 / static_cast<double>(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.ptr() + r * d;
    const double* gr = gy.ptr() + r * d;
    double mean = 0;
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean *= inv_d;
    double var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var *= inv_d;
    const double rstd = 1.0 / std::sqrt(var + eps);
    double m1 = 0, m2 = 0;
    for (std::size_t i = 0; i < d; ++i) {
      xhat[i] = (xr[i] - mean) * rstd;
      dxhat[i] = gr[i] * gamma[i];
      m1 += dxhat[i];
      m2 += dxhat[i] * xhat[i];
      g.dgamma[i] += gr[i] * xhat[i];
      g.dbeta[i] += gr[i];
    }
    m1 *= inv_d;
    m2 *= inv_d;
    double* dxr = g.dx.ptr() + r * d;
    for (std::size_t i = 0; i < d; ++i) dxr[i] = rstd * (dxhat[i] - m1 - xhat[i] * m2);
  }
  return g;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2) throw ShapeError("linear: weight must be rank 2, got " + shape_str(w.shape()));
  const std::size_t in = w.dim(0), out = w.dim(1);
  if (x.rank() == 0 || x.shape().back() != in) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                     shape_str(w.shape()));
  }
  if (!b.empty()) require_shape(b, {out}, "linear bias");
  Shape os = x.shape();
  os.back() = out;
  Tensor y(os);
  const std::size_t rows = x.size() / in;
  if (!b.empty())
    for (std::size_t r = 0; r < rows; ++r) std::copy(b.ptr(), b.ptr() + out, y.ptr() + r * out);
  gemm(false, false, rows, out, in, x.ptr(), w.ptr(), b.empty() ? 0.0 : 1.0, y.ptr());
  return y;
}

LinearGrads linear_vjp(const Tensor& x, const Tensor& w, const Tensor& gy) {
  const std::size_t in = w.dim(0), out = w.dim(1);
  const std::size_t rows = x.size() / in;
  if (gy.size() != rows * out) throw ShapeError("linear_vjp: upstream " + shape_str(gy.shape()));
  LinearGrads g{Tensor(x.shape()), Tensor(w.shape()), Tensor({out})};
  for (std::size_t r = 0; r < rows; ++r) {
    const double* gr = gy.ptr() + r * out;
    for (std::size_t j = 0; j < out; ++j) g.db[j] += gr[j];
  }
  gemm(false, true, rows, in, out, gy.ptr(), w.ptr(), 0.0, g.dx.ptr());
  gemm(true, false, in, out, rows, x.ptr(), gy.ptr(), 0.0, g.dw.ptr());
  return g;
}

namespace {

void check_chw(const Tensor& x, const char* what) {
  if (x.rank() != 3) throw ShapeError(std::string(what) + ": expected [C,H,W], got " +
                                      shape_str(x.shape()));
}

// Valid output range [lo, hi) for a tap offset `off` so that 0 <= o + off < n.
inline void tap_range(std::ptrdiff_t off, std::size_t n, std::size_t& lo, std::size_t& hi) {
  const auto sn = static_cast<std::ptrdiff_t>(n);
  lo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -off));
  hi = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(sn - off, 0, sn));
}

// Accumulates out[y][x] += s * in[y+dy][x+dx] over the valid window.
inline void shifted_axpy(double* out, const double* in, std::size_t h, std::size_t w,
                         std::ptrdiff_t dy, std::ptrdiff_t dx, double s) {
  std::size_t y0, y1, x0, x1;
  tap_range(dy, h, y0, y1);
  tap_range(dx, w, x0, x1);
  for (std::size_t y = y0; y < y1; ++y) {
    double* o = out + y * w;
    const double* i = in + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(y) + dy) * w;
    for (std::size_t xx = x0; xx < x1; ++xx) o[xx] += s * i[static_cast<std::ptrdiff_t>(xx) + dx];
  }
}

// Returns sum over the valid window of a[y][x] * b[y+dy][x+dx].
inline double shifted_dot(const double* a, const double* b, std::size_t h, std::size_t w,
                          std::ptrdiff_t dy, std::ptrdiff_t dx) {
  std::size_t y0, y1, x0, x1;
  tap_range(dy, h, y0, y1);
  tap_range(dx, w, x0, x1);
  double acc = 0;
  for (std::size_t y = y0; y < y1; ++y) {
    const double* ar = a + y * w;
    const double* br = b + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(y) + dy) * w;
    for (std::size_t xx = x0; xx < x1; ++xx) acc += ar[xx] * br[static_cast<std::ptrdiff_t>(xx) + dx];
  }
  return acc;
}

void check_odd_kernel(std::size_t kh, std::size_t kw, const char* what) {
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw ShapeError(std::string(what) + ": kernel extents must be odd, got " +
                     std::to_string(kh) + "x" + std::to_string(kw));
  }
}

// Returns a pointer to the [cin*kh*kw, h*w] patch matrix; 1x1 kernels alias x.
const double* im2col(const Tensor& x, std::size_t kh, std::size_t kw, std::vector<double>& col) {
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2), plane = h * w;
  if (kh == 1 && kw == 1) return x.ptr();
  const auto ph = static_cast<std::ptrdiff_t>(kh / 2), pw = static_cast<std::ptrdiff_t>(kw / 2);
  col.assign(cin * kh * kw * plane, 0.0);
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j)
        shifted_axpy(col.data() + ((ci * kh + i) * kw + j) * plane, x.ptr() + ci * plane, h, w,
                     static_cast<std::ptrdiff_t>(i) - ph, static_cast<std::ptrdiff_t>(j) - pw, 1.0);
  return col.data();
}

void col2im_add(const double* dcol, std::size_t kh, std::size_t kw, Tensor& dx) {
  const std::size_t cin = dx.dim(0), h = dx.dim(1), w = dx.dim(2), plane = h * w;
  const auto ph = static_cast<std::ptrdiff_t>(kh / 2), pw = static_cast<std::ptrdiff_t>(kw / 2);
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j)
        shifted_axpy(dx.ptr() + ci * plane, dcol + ((ci * kh + i) * kw + j) * plane, h, w,
                     ph - static_cast<std::ptrdiff_t>(i), pw - static_cast<std::ptrdiff_t>(j), 1.0);
}

}  // namespace

Tensor depthwise_conv2d(const Tensor& x, const Tensor& k) {
  check_chw(x, "depthwise_conv2d");
  if (k.rank() != 3 || k.dim(0) != x.dim(0)) {
    throw ShapeError("depthwise_conv2d: kernel " + shape_str(k.shape()) + " vs input " +
                     shape_str(x.shape()));
  }
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), kh = k.dim(1), kw = k.dim(2);
  check_odd_kernel(kh, kw, "depthwise_conv2d");
  const auto ph = static_cast<std::ptrdiff_t>(kh / 2), pw = static_cast<std::ptrdiff_t>(kw / 2);
  Tensor y(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* xc = x.ptr() + ch * h * w;
    double* yc = y.ptr() + ch * h * w;
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        shifted_axpy(yc, xc, h, w, static_cast<std::ptrdiff_t>(i) - ph,
                     static_cast<std::ptrdiff_t>(j) - pw, k.at(ch, i, j));
      }
    }
  }
  return y;
}

DepthwiseGrads depthwise_conv2d_vjp(const Tensor& x, const Tensor& k, const Tensor& gy) {
  require_shape(gy, x.shape(), "depthwise_conv2d_vjp");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), kh = k.dim(1), kw = k.dim(2);
  const auto ph = static_cast<std::ptrdiff_t>(kh / 2), pw = static_cast<std::ptrdiff_t>(kw / 2);
  DepthwiseGrads g{Tensor(x.shape()), Tensor(k.shape())};
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* xc = x.ptr() + ch * h * w;
    const double* gc = gy.ptr() + ch * h * w;
    double* dxc = g.dx.ptr() + ch * h * w;
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        const auto dy = static_cast<std::ptrdiff_t>(i) - ph;
        const auto dx = static_cast<std::ptrdiff_t>(j) - pw;
        g.dk.at(ch, i, j) = shifted_dot(gc, xc, h, w, dy, dx);
        shifted_axpy(dxc, gc, h, w, -dy, -dx, k.at(ch, i, j));
      }
    }
  }
  return g;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b) {
  check_chw(x, "conv2d");
  if (w.rank() != 4 || w.dim(1) != x.dim(0)) {
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " vs input " +
                     shape_str(x.shape()));
  }
  const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  check_odd_kernel(kh, kw, "conv2d");
  if (!b.empty()) require_shape(b, {cout}, "conv2d bias");
  const std::size_t plane = h * wd;
  Tensor y({cout, h, wd});
  if (!b.empty())
    for (std::size_t co = 0; co < cout; ++co)
      std::fill(y.ptr() + co * plane, y.ptr() + (co + 1) * plane, b[co]);
  std::vector<double> col;
  const double* cp = im2col(x, kh, kw, col);
  gemm(false, false, cout, plane, cin * kh * kw, w.ptr(), cp, b.empty() ? 0.0 : 1.0, y.ptr());
  return y;
}

ConvGrads conv2d_vjp(const Tensor& x, const Tensor& w, const Tensor& gy) {
  const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  require_shape(gy, {cout, h, wd}, "conv2d_vjp upstream");
  const std::size_t plane = h * wd, taps = cin * kh * kw;
  ConvGrads g{Tensor(x.shape()), Tensor(w.shape()), Tensor({cout})};
  for (std::size_t co = 0; co < cout; ++co) {
    const double* gc = gy.ptr() + co * plane;
    double s = 0;
    for (std::size_t p = 0; p < plane; ++p) s += gc[p];
    g.db[co] = s;
  }
  std::vector<double> col;
  const double* cp = im2col(x, kh, kw, col);
  gemm(false, true, cout, taps, plane, gy.ptr(), cp, 0.0, g.dw.ptr());
  if (kh == 1 && kw == 1) {
    gemm(true, false, taps, plane, cout, w.ptr(), gy.ptr(), 0.0, g.dx.ptr());
  } else {
    std::vector<double> dcol(taps * plane);
    gemm(true, false, taps, plane, cout, w.ptr(), gy.ptr(), 0.0, dcol.data());
    col2im_add(dcol.data(), kh, kw, g.dx);
  }
  return g;
}

namespace {

// Resampling taps for one axis: out index -> up to 4 (source index, weight).
struct Taps {
  std::size_t count = 0;
  std::vector<std::size_t> index;
  std::vector<double> weight;
};

double cubic_weight(double t) {
  constexpr double a = -0.5;
  t = std::fabs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

Taps make_taps(std::size_t in, std::size_t out, bool cubic) {
  Taps taps;
  taps.count = cubic ? 4 : 2;
  taps.index.resize(out * taps.count);
  taps.weight.resize(out * taps.count);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  const auto last = static_cast<std::ptrdiff_t>(in) - 1;
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (!cubic && src < 0) src = 0;
    const double fl = std::floor(src);
    const double t = src - fl;
    const auto base = static_cast<std::ptrdiff_t>(fl);
    for (std::size_t k = 0; k < taps.count; ++k) {
      std::ptrdiff_t idx;
      double wgt;
      if (cubic) {
        idx = base - 1 + static_cast<std::ptrdiff_t>(k);
        wgt = cubic_weight(t - (static_cast<double>(k) - 1.0));
      } else {
        idx = base + static_cast<std::ptrdiff_t>(k);
        wgt = k == 0 ? 1.0 - t : t;
      }
      taps.index[o * taps.count + k] = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(idx, 0, last));
      taps.weight[o * taps.count + k] = wgt;
    }
  }
  return taps;
}

Tensor resample(const Tensor& x, std::size_t oh, std::size_t ow, bool cubic, const char* what) {
  check_chw(x, what);
  if (oh == 0 || ow == 0) throw ShapeError(std::string(what) + ": target extent must be >= 1");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h == 0 || w == 0) throw ShapeError(std::string(what) + ": empty input");
  if (oh == h && ow == w) return Tensor(x.shape(), x.vec());
  const Taps ty = make_taps(h, oh, cubic), tx = make_taps(w, ow, cubic);
  Tensor tmp({c, h, ow});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      const double* row = x.ptr() + (ch * h + y) * w;
      double* trow = tmp.ptr() + (ch * h + y) * ow;
      for (std::size_t o = 0; o < ow; ++o) {
        double acc = 0;
        for (std::size_t k = 0; k < tx.count; ++k) {
          acc += tx.weight[o * tx.count + k] * row[tx.index[o * tx.count + k]];
        }
        trow[o] = acc;
      }
    }
  }
  Tensor out({c, oh, ow});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t o = 0; o < oh; ++o) {
      double* orow = out.ptr() + (ch * oh + o) * ow;
      for (std::size_t k = 0; k < ty.count; ++k) {
        const double wgt = ty.weight[o * ty.count + k];
        const double* trow = tmp.ptr() + (ch * h + ty.index[o * ty.count + k]) * ow;
        for (std::size_t xx = 0; xx < ow; ++xx) orow[xx] += wgt * trow[xx];
      }
    }
  }
  return out;
}

Tensor resample_vjp(const Tensor& gy, std::size_t h, std::size_t w, bool cubic) {
  check_chw(gy, "resample_vjp");
  const std::size_t c = gy.dim(0), oh = gy.dim(1), ow = gy.dim(2);
  if (oh == h && ow == w) return Tensor(gy.shape(), gy.vec());
  const Taps ty = make_taps(h, oh, cubic), tx = make_taps(w, ow, cubic);
  Tensor tmp({c, h, ow});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t o = 0; o < oh; ++o) {
      const double* grow = gy.ptr() + (ch * oh + o) * ow;
      for (std::size_t k = 0; k < ty.count; ++k) {
        const double wgt = ty.weight[o * ty.count + k];
        double* trow = tmp.ptr() + (ch * h + ty.index[o * ty.count + k]) * ow;
        for (std::size_t xx = 0; xx < ow; ++xx) trow[xx] += wgt * grow[xx];
      }
    }
  }
  Tensor dx({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      const double* trow = tmp.ptr() + (ch * h + y) * ow;
      double* drow = dx.ptr() + (ch * h + y) * w;
      for (std::size_t o = 0; o < ow; ++o) {
        for (std::size_t k = 0; k < tx.count; ++k) {
          drow[tx.index[o * tx.count + k]] += tx.weight[o * tx.count + k] * trow[o];
        }
      }
    }
  }
  return dx;
}

}  // namespace

Tensor resize_bicubic(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  return resample(x, out_h, out_w, true, "resize_bicubic");
}
Tensor resize_bicubic_vjp(const Tensor& gy, std::size_t in_h, std::size_t in_w) {
  return resample_vjp(gy, in_h, in_w, true);
}
Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  return resample(x, out_h, out_w, false, "resize_bilinear");
}
Tensor resize_bilinear_vjp(const Tensor& gy, std::size_t in_h, std::size_t in_w) {
  return resample_vjp(gy, in_h, in_w, false);
}

Tensor resize_nearest(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 2 && x.rank() != 3) {
    throw ShapeError("resize_nearest: expected [H,W] or [C,H,W], got " + shape_str(x.shape()));
  }
  if (out_h == 0 || out_w == 0) throw ShapeError("resize_nearest: target extent must be >= 1");
  const bool planar = x.rank() == 3;
  const std::size_t c = planar ? x.dim(0) : 1;
  const std::size_t h = x.dim(planar ? 1 : 0), w = x.dim(planar ? 2 : 1);
  auto src = [](std::size_t o, std::size_t in, std::size_t out) {
    const auto s = static_cast<std::size_t>(
        std::floor((static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out)));
    return std::min(s, in - 1);
  };
  Tensor y(planar ? Shape{c, out_h, out_w} : Shape{out_h, out_w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const std::size_t sy = src(oy, h, out_h);
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        y[(ch * out_h + oy) * out_w + ox] = x[(ch * h + sy) * w + src(ox, w, out_w)];
      }
    }
  }
  return y;
}

namespace {

std::size_t bin_start(std::size_t i, std::size_t n, std::size_t bins) { return i * n / bins; }
std::size_t bin_end(std::size_t i, std::size_t n, std::size_t bins) {
  return ((i + 1) * n + bins - 1) / bins;
}

}  // namespace

Tensor adaptive_avg_pool2d(const Tensor& x, std::size_t bins) {
  check_chw(x, "adaptive_avg_pool2d");
  if (bins == 0) throw ShapeError("adaptive_avg_pool2d: bins must be >= 1");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor y({c, bins, bins});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t by = 0; by < bins; ++by) {
      const std::size_t y0 = bin_start(by, h, bins), y1 = bin_end(by, h, bins);
      for (std::size_t bx = 0; bx < bins; ++bx) {
        const std::size_t x0 = bin_start(bx, w, bins), x1 = bin_end(bx, w, bins);
        double acc = 0;
        for (std::size_t yy = y0; yy < y1; ++yy) {
          for (std::size_t xx = x0; xx < x1; ++xx) acc += x.at(ch, yy, xx);
        }
        y.at(ch, by, bx) = acc / static_cast<double>((y1 - y0) * (x1 - x0));
      }
    }
  }
  return y;
}

Tensor adaptive_avg_pool2d_vjp(const Tensor& gy, std::size_t in_h, std::size_t in_w) {
  check_chw(gy, "adaptive_avg_pool2d_vjp");
  const std::size_t c = gy.dim(0), bins = gy.dim(1);
  Tensor dx({c, in_h, in_w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t by = 0; by < bins; ++by) {
      const std::size_t y0 = bin_start(by, in_h, bins), y1 = bin_end(by, in_h, bins);
      for (std::size_t bx = 0; bx < bins; ++bx) {
        const std::size_t x0 = bin_start(bx, in_w, bins), x1 = bin_end(bx, in_w, bins);
        const double g = gy.at(ch, by, bx) / static_cast<double>((y1 - y0) * (x1 - x0));
        for (std::size_t yy = y0; yy < y1; ++yy) {
          for (std::size_t xx = x0; xx < x1; ++xx) dx.at(ch, yy, xx) += g;
        }
      }
    }
  }
  return dx;
}

Tensor hwc_to_chw(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("hwc_to_chw: expected rank 3, got " + shape_str(x.shape()));
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  Tensor y({c, h, w});
  for (std::size_t p = 0; p < h * w; ++p) {
    for (std::size_t ch = 0; ch < c; ++ch) y[ch * h * w + p] = x[p * c + ch];
  }
  return y;
}

Tensor chw_to_hwc(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("chw_to_hwc: expected rank 3, got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor y({h, w, c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t p = 0; p < h * w; ++p) y[p * c + ch] = x[ch * h * w + p];
  }
  return y;
}

Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const std::size_t h = parts[0].dim(1), w = parts[0].dim(2);
  std::size_t c = 0;
  for (const auto& p : parts) {
    check_chw(p, "concat_channels");
    if (p.dim(1) != h || p.dim(2) != w) {
      throw ShapeError("concat_channels: spatial mismatch " + shape_str(parts[0].shape()) +
                       " vs " + shape_str(p.shape()));
    }
    c += p.dim(0);
  }
  std::vector<double> data;
  data.reserve(c * h * w);
  for (const auto& p : parts) data.insert(data.end(), p.vec().begin(), p.vec().end());
  return Tensor({c, h, w}, std::move(data));
}

std::vector<Tensor> split_channels(const Tensor& x, std::span<const std::size_t> sizes) {
  check_chw(x, "split_channels");
  const std::size_t h = x.dim(1), w = x.dim(2);
  std::size_t total = 0;
  for (auto s : sizes) total += s;
  if (total != x.dim(0)) {
    throw ShapeError("split_channels: sizes sum to " + std::to_string(total) + " but input has " +
                     std::to_string(x.dim(0)) + " channels");
  }
  std::vector<Tensor> out;
  std::size_t off = 0;
  for (auto s : sizes) {
    auto first = x.vec().begin() + static_cast<std::ptrdiff_t>(off * h * w);
    out.emplace_back(Shape{s, h, w},
                     std::vector<double>(first, first + static_cast<std::ptrdiff_t>(s * h * w)));
    off += s;
  }
  return out;
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::clamp(x[i], lo, hi);
  return y;
}

}  // namespace mscrack
