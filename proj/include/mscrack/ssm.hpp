#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mscrack/random.hpp"
#include "mscrack/tensor.hpp"

// Selective state-space (S6) layer on a [L, C] sequence with N-dimensional
// diagonal state per channel:
//
//   delta_k = softplus(x_k Wd + bd)        [C]
//   B_k = x_k Wb,  C_k = x_k Wc            [N]
//   Abar = exp(delta A),  Bbar = (Abar - 1) / A * B
//   h_k = Abar_k h_{k-1} + Bbar_k x_k,     h_0 = 0
//   y_k = <C_k, h_k> + D x_k

namespace mscrack {

struct SsmParams {
  Tensor a_log;    // [C,N]; A = -exp(a_log)
  Tensor d;        // [C]
  Tensor delta_w;  // [C,C]
  Tensor delta_b;  // [C]
  Tensor b_w;      // [C,N]
  Tensor c_w;      // [C,N]

  std::size_t channels() const { return d.size(); }
  std::size_t state_dim() const { return a_log.dim(1); }
  Tensor a() const;

  // S4-real initialization: -A spans [1, N] per channel, D = 1, softplus(delta_b)
  // log-uniform in [0.01, 0.1].
  static SsmParams init(std::size_t channels, std::size_t state_dim, Rng& rng);
  static SsmParams zeros_like(const SsmParams& p);

  // Fixed order used for checkpointing and optimizer bookkeeping.
  std::vector<std::pair<std::string, Tensor*>> named();
  std::vector<std::pair<std::string, const Tensor*>> named() const;
};

struct Projections {
  Tensor pre_delta;  // [L,C], before softplus
  Tensor delta;      // [L,C]
  Tensor b;          // [L,N]
  Tensor c;          // [L,N]
};

Projections s6_project(const Tensor& x, const SsmParams& p);

inline constexpr double kZohSeriesThreshold = 1e-4;

// Per (a, delta): Abar, the input gain factor E = (Abar - 1)/a, and the
// partials of E. Below |delta*a| < 1e-4 E uses delta*(1 + z/2 + z^2/6).
struct ZohTerms {
  double abar;
  double e;
  double de_ddelta;
  double de_da;
};
ZohTerms zoh_terms(double a, double delta);

struct DiscretizedPair {
  Tensor abar;  // [L,C,N]
  Tensor bbar;  // [L,C,N]
};

// a [C,N], b_t [L,N], delta [L,C] (strictly positive).
DiscretizedPair discretize_zoh(const Tensor& a, const Tensor& b_t, const Tensor& delta);

// Scan over already discretized coefficients. x [L,C], c [L,N], d [C].
Tensor scan_discretized_seq(const DiscretizedPair& dp, const Tensor& x, const Tensor& c,
                            const Tensor& d);
Tensor scan_discretized_par(const DiscretizedPair& dp, const Tensor& x, const Tensor& c,
                            const Tensor& d);

// Affine map h -> a*h + b; the scan element.
struct ScanElem {
  double a = 1.0;
  double b = 0.0;
};
// Apply `earlier` first, then `later`: (a2,b2) o (a1,b1) = (a1*a2, a2*b1 + b2).
inline ScanElem combine(const ScanElem& later, const ScanElem& earlier) {
  return {earlier.a * later.a, later.a * earlier.b + later.b};
}
// Inclusive prefix composition with a work-efficient up-sweep/down-sweep.
void blelloch_inclusive_scan(std::vector<ScanElem>& elems);

Tensor selective_scan_seq(const Tensor& x, const SsmParams& p);
Tensor selective_scan_par(const Tensor& x, const SsmParams& p);

struct ScanCache {
  Tensor x;
  Projections proj;
  DiscretizedPair dp;
  Tensor h;  // [L,C,N] states after each step
};

Tensor selective_scan_forward(const Tensor& x, const SsmParams& p, ScanCache& cache);

struct ScanGrads {
  Tensor dx;
  SsmParams dp;
};
ScanGrads selective_scan_vjp(const ScanCache& cache, const SsmParams& p, const Tensor& gy);
ScanGrads selective_scan_vjp(const Tensor& x, const SsmParams& p, const Tensor& gy);

}  // namespace mscrack
