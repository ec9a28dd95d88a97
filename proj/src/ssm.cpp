#include "mscrack/ssm.hpp"

#include <bit>
#include <cmath>

#include "mscrack/ops.hpp"

namespace mscrack {

Tensor SsmParams::a() const {
  Tensor a(a_log.shape());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = -std::exp(a_log[i]);
  return a;
}

SsmParams SsmParams::init(std::size_t channels, std::size_t state_dim, Rng& rng) {
  SsmParams p;
  p.a_log = Tensor({channels, state_dim});
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t n = 0; n < state_dim; ++n) {
      p.a_log.at(c, n) = std::log(static_cast<double>(n + 1));
    }
  }
  p.d = Tensor::full({channels}, 1.0);
  const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
  p.delta_w = uniform_tensor({channels, channels}, rng, -bound, bound);
  p.delta_b = Tensor({channels});
  for (auto& v : p.delta_b.data()) {
    const double dt = std::exp(rng.uniform(std::log(0.01), std::log(0.1)));
    v = std::log(std::expm1(dt));  // inverse softplus
  }
  p.b_w = uniform_tensor({channels, state_dim}, rng, -bound, bound);
  p.c_w = uniform_tensor({channels, state_dim}, rng, -bound, bound);
  return p;
}

SsmParams SsmParams::zeros_like(const SsmParams& p) {
  return {Tensor::zeros_like(p.a_log),   Tensor::zeros_like(p.d),
          Tensor::zeros_like(p.delta_w), Tensor::zeros_like(p.delta_b),
          Tensor::zeros_like(p.b_w),     Tensor::zeros_like(p.c_w)};
}

std::vector<std::pair<std::string, Tensor*>> SsmParams::named() {
  return {{"a_log", &a_log}, {"d", &d},     {"delta_w", &delta_w},
          {"delta_b", &delta_b}, {"b_w", &b_w}, {"c_w", &c_w}};
}

std::vector<std::pair<std::string, const Tensor*>> SsmParams::named() const {
  return {{"a_log", &a_log}, {"d", &d},     {"delta_w", &delta_w},
          {"delta_b", &delta_b}, {"b_w", &b_w}, {"c_w", &c_w}};
}

namespace {

void check_input(const Tensor& x, const SsmParams& p) {
  if (x.rank() != 2 || x.dim(1) != p.channels()) {
    throw ShapeError("selective scan: input " + shape_str(x.shape()) + " does not match " +
                     std::to_string(p.channels()) + " channels");
  }
}

}  // namespace

Projections s6_project(const Tensor& x, const SsmParams& p) {
  check_input(x, p);
  Projections pr;
  pr.pre_delta = linear(x, p.delta_w, p.delta_b);
  pr.delta = Tensor(pr.pre_delta.shape());
  for (std::size_t i = 0; i < pr.delta.size(); ++i) pr.delta[i] = softplus(pr.pre_delta[i]);
  pr.b = linear(x, p.b_w, Tensor{});
  pr.c = linear(x, p.c_w, Tensor{});
  return pr;
}

ZohTerms zoh_terms(double a, double delta) {
  const double z = delta * a;
  const double abar = std::exp(z);
  if (std::fabs(z) < kZohSeriesThreshold) {
    return {abar, delta * (1.0 + z / 2.0 + z * z / 6.0), 1.0 + z + z * z / 2.0,
            delta * delta * (0.5 + z / 3.0)};
  }
  const double e = std::expm1(z) / a;
  return {abar, e, abar, (delta * abar - e) / a};
}

DiscretizedPair discretize_zoh(const Tensor& a, const Tensor& b_t, const Tensor& delta) {
  if (a.rank() != 2 || b_t.rank() != 2 || delta.rank() != 2 || b_t.dim(1) != a.dim(1) ||
      delta.dim(1) != a.dim(0) || b_t.dim(0) != delta.dim(0)) {
    throw ShapeError("discretize_zoh: incompatible shapes A " + shape_str(a.shape()) + ", B " +
                     shape_str(b_t.shape()) + ", delta " + shape_str(delta.shape()));
  }
  const std::size_t len = delta.dim(0), ch = a.dim(0), ns = a.dim(1);
  DiscretizedPair dp{Tensor({len, ch, ns}), Tensor({len, ch, ns})};
  for (std::size_t l = 0; l < len; ++l) {
    for (std::size_t c = 0; c < ch; ++c) {
      const double dl = delta.at(l, c);
      if (!(dl > 0.0)) {
        throw Error("discretize_zoh: delta must be strictly positive, got " + std::to_string(dl) +
                    " at step " + std::to_string(l) + ", channel " + std::to_string(c));
      }
      for (std::size_t n = 0; n < ns; ++n) {
        const ZohTerms t = zoh_terms(a.at(c, n), dl);
        dp.abar.at(l, c, n) = t.abar;
        dp.bbar.at(l, c, n) = t.e * b_t.at(l, n);
      }
    }
  }
  return dp;
}

namespace {

void check_discretized(const DiscretizedPair& dp, const Tensor& x, const Tensor& c,
                       const Tensor& d) {
  if (x.rank() != 2 || dp.abar.rank() != 3 || dp.abar.shape() != dp.bbar.shape() ||
      dp.abar.dim(0) != x.dim(0) || dp.abar.dim(1) != x.dim(1) || c.rank() != 2 ||
      c.dim(0) != x.dim(0) || c.dim(1) != dp.abar.dim(2) || d.size() != x.dim(1)) {
    throw ShapeError("scan: inconsistent shapes x " + shape_str(x.shape()) + ", Abar " +
                     shape_str(dp.abar.shape()) + ", C " + shape_str(c.shape()));
  }
}

}  // namespace

Tensor scan_discretized_seq(const DiscretizedPair& dp, const Tensor& x, const Tensor& c,
                            const Tensor& d) {
  check_discretized(dp, x, c, d);
  const std::size_t len = x.dim(0), ch = x.dim(1), ns = c.dim(1);
  Tensor y({len, ch});
  std::vector<double> h(ch * ns, 0.0);
  for (std::size_t l = 0; l < len; ++l) {
    const double* ab = dp.abar.ptr() + l * ch * ns;
    const double* bb = dp.bbar.ptr() + l * ch * ns;
    const double* cl = c.ptr() + l * ns;
    for (std::size_t k = 0; k < ch; ++k) {
      const double xv = x.at(l, k);
      double acc = 0;
      for (std::size_t n = 0; n < ns; ++n) {
        double& hs = h[k * ns + n];
        hs = ab[k * ns + n] * hs + bb[k * ns + n] * xv;
        acc += cl[n] * hs;
      }
      y.at(l, k) = acc + d[k] * xv;
    }
  }
  return y;
}

void blelloch_inclusive_scan(std::vector<ScanElem>& elems) {
  const std::size_t len = elems.size();
  if (len <= 1) return;
  const std::size_t cap = std::bit_ceil(len);
  std::vector<ScanElem> tree(cap);  // padding holds the identity
  std::copy(elems.begin(), elems.end(), tree.begin());
  for (std::size_t stride = 1; stride < cap; stride *= 2) {
    for (std::size_t i = 2 * stride - 1; i < cap; i += 2 * stride) {
      tree[i] = combine(tree[i], tree[i - stride]);
    }
  }
  tree[cap - 1] = ScanElem{};
  for (std::size_t stride = cap / 2; stride >= 1; stride /= 2) {
    for (std::size_t i = 2 * stride - 1; i < cap; i += 2 * stride) {
      const ScanElem left = tree[i - stride];
      tree[i - stride] = tree[i];
      tree[i] = combine(left, tree[i]);
    }
  }
  // tree now holds exclusive prefixes.
  for (std::size_t i = 0; i < len; ++i) elems[i] = combine(elems[i], tree[i]);
}

Tensor scan_discretized_par(const DiscretizedPair& dp, const Tensor& x, const Tensor& c,
                            const Tensor& d) {
  check_discretized(dp, x, c, d);
  const std::size_t len = x.dim(0), ch = x.dim(1), ns = c.dim(1);
  Tensor y({len, ch});
  for (std::size_t l = 0; l < len; ++l) {
    for (std::size_t k = 0; k < ch; ++k) y.at(l, k) = d[k] * x.at(l, k);
  }
  std::vector<ScanElem> lane(len);
  for (std::size_t k = 0; k < ch; ++k) {
    for (std::size_t n = 0; n < ns; ++n) {
      for (std::size_t l = 0; l < len; ++l) {
        const std::size_t idx = (l * ch + k) * ns + n;
        lane[l] = {dp.abar[idx], dp.bbar[idx] * x.at(l, k)};
      }
      blelloch_inclusive_scan(lane);
      for (std::size_t l = 0; l < len; ++l) y.at(l, k) += c.at(l, n) * lane[l].b;
    }
  }
  return y;
}

Tensor selective_scan_seq(const Tensor& x, const SsmParams& p) {
  check_input(x, p);
  const std::size_t len = x.dim(0), ch = x.dim(1), ns = p.state_dim();
  Tensor y({len, ch});
  if (len == 0) return y;
  const Projections pr = s6_project(x, p);
  const Tensor a = p.a();
  std::vector<double> h(ch * ns, 0.0);
  for (std::size_t l = 0; l < len; ++l) {
    const double* bl = pr.b.ptr() + l * ns;
    const double* cl = pr.c.ptr() + l * ns;
    for (std::size_t k = 0; k < ch; ++k) {
      const double xv = x.at(l, k);
      const double dl = pr.delta.at(l, k);
      const double* ak = a.ptr() + k * ns;
      double* hk = h.data() + k * ns;
      double acc = 0;
      for (std::size_t n = 0; n < ns; ++n) {
        const ZohTerms t = zoh_terms(ak[n], dl);
        hk[n] = t.abar * hk[n] + t.e * bl[n] * xv;
        acc += cl[n] * hk[n];
      }
      y.at(l, k) = acc + p.d[k] * xv;
    }
  }
  return y;
}

Tensor selective_scan_par(const Tensor& x, const SsmParams& p) {
  check_input(x, p);
  if (x.dim(0) == 0) return Tensor({0, x.dim(1)});
  const Projections pr = s6_project(x, p);
  const DiscretizedPair dp = discretize_zoh(p.a(), pr.b, pr.delta);
  return scan_discretized_par(dp, x, pr.c, p.d);
}

Tensor selective_scan_forward(const Tensor& x, const SsmParams& p, ScanCache& cache) {
  check_input(x, p);
  const std::size_t len = x.dim(0), ch = x.dim(1), ns = p.state_dim();
  cache.x = x;
  cache.proj = s6_project(x, p);
  cache.dp = discretize_zoh(p.a(), cache.proj.b, cache.proj.delta);
  cache.h = Tensor({len, ch, ns});
  Tensor y({len, ch});
  for (std::size_t l = 0; l < len; ++l) {
    const double* ab = cache.dp.abar.ptr() + l * ch * ns;
    const double* bb = cache.dp.bbar.ptr() + l * ch * ns;
    const double* hp = l ? cache.h.ptr() + (l - 1) * ch * ns : nullptr;
    double* hl = cache.h.ptr() + l * ch * ns;
    const double* cl = cache.proj.c.ptr() + l * ns;
    for (std::size_t k = 0; k < ch; ++k) {
      const double xv = x.at(l, k);
      double acc = 0;
      for (std::size_t n = 0; n < ns; ++n) {
        const std::size_t i = k * ns + n;
        hl[i] = (hp ? ab[i] * hp[i] : 0.0) + bb[i] * xv;
        acc += cl[n] * hl[i];
      }
      y.at(l, k) = acc + p.d[k] * xv;
    }
  }
  return y;
}

ScanGrads selective_scan_vjp(const ScanCache& cache, const SsmParams& p, const Tensor& gy) {
  const Tensor& x = cache.x;
  require_shape(gy, x.shape(), "selective_scan_vjp upstream");
  const std::size_t len = x.dim(0), ch = x.dim(1), ns = p.state_dim();
  ScanGrads g{Tensor(x.shape()), SsmParams::zeros_like(p)};
  const Tensor a = p.a();
  Tensor d_delta({len, ch});
  Tensor d_b({len, ns});
  Tensor d_c({len, ns});
  Tensor d_a({ch, ns});
  std::vector<double> lam(ch * ns, 0.0);

  for (std::size_t l = len; l-- > 0;) {
    const double* hl = cache.h.ptr() + l * ch * ns;
    const double* hp = l ? cache.h.ptr() + (l - 1) * ch * ns : nullptr;
    const double* ab = cache.dp.abar.ptr() + l * ch * ns;
    const double* bb = cache.dp.bbar.ptr() + l * ch * ns;
    const double* ab_next = l + 1 < len ? cache.dp.abar.ptr() + (l + 1) * ch * ns : nullptr;
    const double* cl = cache.proj.c.ptr() + l * ns;
    const double* bl = cache.proj.b.ptr() + l * ns;
    double* dcl = d_c.ptr() + l * ns;
    double* dbl = d_b.ptr() + l * ns;
    for (std::size_t k = 0; k < ch; ++k) {
      const double gyv = gy.at(l, k);
      const double xv = x.at(l, k);
      const double dl = cache.proj.delta.at(l, k);
      g.dp.d[k] += gyv * xv;
      double dx = gyv * p.d[k];
      double ddelta = 0;
      for (std::size_t n = 0; n < ns; ++n) {
        const std::size_t i = k * ns + n;
        dcl[n] += gyv * hl[i];
        lam[i] = gyv * cl[n] + (ab_next ? ab_next[i] * lam[i] : 0.0);
        const double d_abar = hp ? lam[i] * hp[i] : 0.0;
        const double d_bbar = lam[i] * xv;
        dx += lam[i] * bb[i];
        const double an = a[i];
        const ZohTerms t = zoh_terms(an, dl);
        ddelta += d_abar * ab[i] * an + d_bbar * bl[n] * t.de_ddelta;
        d_a[i] += d_abar * ab[i] * dl + d_bbar * bl[n] * t.de_da;
        dbl[n] += d_bbar * t.e;
      }
      g.dx.at(l, k) = dx;
      d_delta.at(l, k) = ddelta;
    }
  }

  for (std::size_t i = 0; i < d_a.size(); ++i) g.dp.a_log[i] = d_a[i] * a[i];

  Tensor d_pre({len, ch});
  for (std::size_t i = 0; i < d_pre.size(); ++i) {
    d_pre[i] = d_delta[i] * sigmoid(cache.proj.pre_delta[i]);
  }
  const LinearGrads gd = linear_vjp(x, p.delta_w, d_pre);
  const LinearGrads gb = linear_vjp(x, p.b_w, d_b);
  const LinearGrads gc = linear_vjp(x, p.c_w, d_c);
  g.dp.delta_w = gd.dw;
  g.dp.delta_b = gd.db;
  g.dp.b_w = gb.dw;
  g.dp.c_w = gc.dw;
  g.dx += gd.dx;
  g.dx += gb.dx;
  g.dx += gc.dx;
  return g;
}

ScanGrads selective_scan_vjp(const Tensor& x, const SsmParams& p, const Tensor& gy) {
  ScanCache cache;
  selective_scan_forward(x, p, cache);
  return selective_scan_vjp(cache, p, gy);
}

}  // namespace mscrack
