#include <cmath>
#include <numeric>

#include "doctest.h"
#include "mscrack/gradcheck.hpp"
#include "mscrack/ops.hpp"
#include "mscrack/ssm.hpp"
#include "test_util.hpp"

using namespace mscrack;
using testutil::rand_tensor;

namespace {

SsmParams random_params(std::size_t c, std::size_t n, Rng& rng) {
  SsmParams p = SsmParams::init(c, n, rng);
  p.delta_w = rand_tensor({c, c}, rng, -0.5, 0.5);
  p.b_w = rand_tensor({c, n}, rng);
  p.c_w = rand_tensor({c, n}, rng);
  p.d = rand_tensor({c}, rng);
  return p;
}

// Plain triple loop straight from the recurrence, with the closed-form ZOH gain.
Tensor oracle_scan(const Tensor& x, const SsmParams& p) {
  const std::size_t l = x.dim(0), c = x.dim(1), n = p.state_dim();
  Tensor y({l, c});
  std::vector<double> h(c * n, 0.0);
  for (std::size_t k = 0; k < l; ++k) {
    std::vector<double> bk(n, 0.0), ck(n, 0.0);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < c; ++i) {
        bk[j] += x.at(k, i) * p.b_w.at(i, j);
        ck[j] += x.at(k, i) * p.c_w.at(i, j);
      }
    for (std::size_t ch = 0; ch < c; ++ch) {
      double pre = p.delta_b[ch];
      for (std::size_t i = 0; i < c; ++i) pre += x.at(k, i) * p.delta_w.at(i, ch);
      const double delta = std::log1p(std::exp(pre));
      double acc = p.d[ch] * x.at(k, ch);
      for (std::size_t j = 0; j < n; ++j) {
        const double a = -std::exp(p.a_log.at(ch, j));
        const double abar = std::exp(delta * a);
        h[ch * n + j] = abar * h[ch * n + j] + std::expm1(delta * a) / a * bk[j] * x.at(k, ch);
        acc += ck[j] * h[ch * n + j];
      }
      y.at(k, ch) = acc;
    }
  }
  return y;
}

}  // namespace

TEST_CASE("s6_project") {
  Rng rng(1);
  SUBCASE("zero weights give constant softplus(bias)") {
    SsmParams p = SsmParams::zeros_like(SsmParams::init(3, 2, rng));
    p.delta_b = Tensor({3}, {-1.0, 0.0, 2.0});
    const auto pr = s6_project(rand_tensor({5, 3}, rng), p);
    for (std::size_t k = 0; k < 5; ++k)
      for (std::size_t c = 0; c < 3; ++c) CHECK(pr.delta.at(k, c) == std::log1p(std::exp(p.delta_b[c])));
  }
  SUBCASE("shapes and positivity") {
    const SsmParams p = random_params(4, 3, rng);
    const auto pr = s6_project(rand_tensor({7, 4}, rng, -20, 20), p);
    CHECK(pr.delta.shape() == Shape{7, 4});
    CHECK(pr.b.shape() == Shape{7, 3});
    CHECK(pr.c.shape() == Shape{7, 3});
    for (double v : pr.delta.data()) CHECK(v > 0.0);
  }
}

TEST_CASE("SsmParams init") {
  Rng rng(2);
  const SsmParams p = SsmParams::init(5, 4, rng);
  const Tensor a = p.a();
  for (std::size_t c = 0; c < 5; ++c) {
    for (std::size_t n = 0; n < 4; ++n) CHECK(a.at(c, n) == doctest::Approx(-double(n + 1)));
    CHECK(p.d[c] == 1.0);
    const double dt = softplus(p.delta_b[c]);
    CHECK(dt >= 0.01 - 1e-12);
    CHECK(dt <= 0.1 + 1e-12);
  }
}

TEST_CASE("discretize_zoh") {
  SUBCASE("closed form at A=-1, delta=ln 2") {
    const auto dp = discretize_zoh(Tensor({1, 1}, {-1.0}), Tensor({1, 1}, {1.0}), Tensor({1, 1}, {std::log(2.0)}));
    CHECK(dp.abar[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(dp.bbar[0] == doctest::Approx(0.5).epsilon(1e-15));
  }
  SUBCASE("tiny step") {
    const auto dp = discretize_zoh(Tensor({1, 1}, {-3.0}), Tensor({1, 1}, {2.0}), Tensor({1, 1}, {1e-12}));
    CHECK(dp.abar[0] == doctest::Approx(1.0));
    CHECK(std::fabs(dp.bbar[0]) < 1e-11);
  }
  SUBCASE("series and exact branches meet at the threshold") {
    for (double a : {-1.0, -0.37, -4.0, -250.0}) {
      const double delta = kZohSeriesThreshold / -a;
      const double lo = std::nextafter(delta, 0.0), hi = std::nextafter(delta, 1.0);
      const ZohTerms s = zoh_terms(a, lo), e = zoh_terms(a, hi);
      CHECK(std::fabs(lo * -a) < kZohSeriesThreshold);
      CHECK(std::fabs(s.e - e.e) / std::fabs(e.e) < 1e-10);
      CHECK(std::fabs(s.de_ddelta - e.de_ddelta) / std::fabs(e.de_ddelta) < 1e-10);
      CHECK(std::fabs(s.de_da - e.de_da) / std::fabs(e.de_da) < 1e-6);
      // Independent reference for the gain itself.
      CHECK(std::fabs(s.e - std::expm1(a * lo) / a) / std::fabs(s.e) < 1e-10);
    }
  }
  SUBCASE("decay in (0,1)") {
    Rng rng(3);
    const Tensor a = mscrack::uniform_tensor({3, 4}, rng, -5, -0.01);
    const auto dp = discretize_zoh(a, rand_tensor({6, 4}, rng), rand_tensor({6, 3}, rng, 1e-3, 2));
    CHECK(dp.abar.shape() == Shape{6, 3, 4});
    for (double v : dp.abar.data()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
  }
  SUBCASE("non-positive delta rejected") {
    CHECK_THROWS_AS(discretize_zoh(Tensor({1, 1}, {-1.0}), Tensor({1, 1}, {1.0}), Tensor({1, 1}, {0.0})), Error);
    CHECK_THROWS_AS(discretize_zoh(Tensor({1, 1}, {-1.0}), Tensor({1, 1}, {1.0}), Tensor({1, 1}, {-0.1})), Error);
  }
}

TEST_CASE("zoh_terms partials match finite differences") {
  for (double a : {-2.0, -0.5, -1e-3}) {
    for (double delta : {0.3, 1e-6, 0.02}) {
      const ZohTerms t = zoh_terms(a, delta);
      const double hd = 1e-6 * delta, ha = 1e-6 * std::fabs(a);
      const double nd = (zoh_terms(a, delta + hd).e - zoh_terms(a, delta - hd).e) / (2 * hd);
      const double na = (zoh_terms(a + ha, delta).e - zoh_terms(a - ha, delta).e) / (2 * ha);
      CHECK(t.de_ddelta == doctest::Approx(nd).epsilon(1e-6));
      CHECK(t.de_da == doctest::Approx(na).epsilon(1e-5));
    }
  }
}

TEST_CASE("scan on fixed discretization") {
  SUBCASE("hand-unrolled decay") {
    DiscretizedPair dp{Tensor::full({4, 1, 1}, 0.5), Tensor::full({4, 1, 1}, 1.0)};
    const Tensor x({4, 1}, {1, 0, 0, 0});
    const Tensor c = Tensor::full({4, 1}, 1.0), d({1}, {0.0});
    const Tensor expect({4, 1}, {1, 0.5, 0.25, 0.125});
    CHECK(scan_discretized_seq(dp, x, c, d) == expect);
    CHECK(scan_discretized_par(dp, x, c, d) == expect);
  }
  SUBCASE("pure skip") {
    Rng rng(4);
    DiscretizedPair dp{rand_tensor({9, 2, 3}, rng, 0, 1), Tensor({9, 2, 3})};
    const Tensor x = rand_tensor({9, 2}, rng);
    const Tensor d = Tensor::full({2}, 1.0);
    CHECK(scan_discretized_seq(dp, x, rand_tensor({9, 3}, rng), d) == x);
  }
}

TEST_CASE("selective scan against an independent oracle") {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const SsmParams p = random_params(3, 4, rng);
    const Tensor x = rand_tensor({1 + rng.below(40), 3}, rng);
    CHECK(testutil::rel_diff(selective_scan_seq(x, p), oracle_scan(x, p)) < 1e-12);
  }
}

TEST_CASE("selective scan trivial cases") {
  Rng rng(6);
  const SsmParams p = random_params(3, 2, rng);
  SUBCASE("zero input") {
    const Tensor y = selective_scan_seq(Tensor({10, 3}), p);
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("empty sequence") {
    CHECK(selective_scan_seq(Tensor({0, 3}), p).shape() == Shape{0, 3});
    CHECK(selective_scan_par(Tensor({0, 3}), p).shape() == Shape{0, 3});
  }
  SUBCASE("single step") {
    const Tensor x = rand_tensor({1, 3}, rng);
    const auto pr = s6_project(x, p);
    const Tensor a = p.a();
    const Tensor y = selective_scan_par(x, p);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      double expect = p.d[ch] * x[ch];
      for (std::size_t j = 0; j < 2; ++j) {
        const double bbar = std::expm1(pr.delta[ch] * a.at(ch, j)) / a.at(ch, j) * pr.b[j];
        expect += pr.c[j] * bbar * x[ch];
      }
      CHECK(y[ch] == doctest::Approx(expect).epsilon(1e-13));
    }
  }
}

TEST_CASE("parallel scan matches sequential on 100 random cases") {
  Rng rng(7);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t l = trial == 0 ? 1 : trial == 1 ? 1025 : 1 + rng.below(1025);
    const std::size_t c = 1 + rng.below(3), n = 1 + rng.below(4);
    const SsmParams p = random_params(c, n, rng);
    const Tensor x = rand_tensor({l, c}, rng);
    worst = std::max(worst, testutil::rel_diff(selective_scan_par(x, p), selective_scan_seq(x, p)));
  }
  CHECK(worst <= 1e-10);
}

TEST_CASE("parallel scan matches sequential at L = 4096") {
  Rng rng(8);
  const SsmParams p = random_params(2, 3, rng);
  const Tensor x = rand_tensor({4096, 2}, rng);
  CHECK(testutil::rel_diff(selective_scan_par(x, p), selective_scan_seq(x, p)) <= 1e-10);
}

TEST_CASE("combine is associative") {
  Rng rng(9);
  for (int i = 0; i < 1000; ++i) {
    const ScanElem p{rng.uniform(-2, 2), rng.uniform(-2, 2)}, q{rng.uniform(-2, 2), rng.uniform(-2, 2)},
        r{rng.uniform(-2, 2), rng.uniform(-2, 2)};
    const ScanElem lhs = combine(combine(p, q), r), rhs = combine(p, combine(q, r));
    CHECK(std::fabs(lhs.a - rhs.a) <= 1e-12);
    CHECK(std::fabs(lhs.b - rhs.b) <= 1e-12);
  }
}

TEST_CASE("blelloch scan matches a running fold") {
  Rng rng(10);
  for (std::size_t n : {1, 2, 3, 7, 8, 33, 100}) {
    std::vector<ScanElem> e(n);
    for (auto& v : e) v = {rng.uniform(0, 1), rng.uniform(-1, 1)};
    std::vector<ScanElem> ref(n);
    ScanElem acc;
    for (std::size_t i = 0; i < n; ++i) ref[i] = acc = combine(e[i], acc);
    blelloch_inclusive_scan(e);
    REQUIRE(e.size() == n);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(e[i].a == doctest::Approx(ref[i].a).epsilon(1e-13));
      CHECK(e[i].b == doctest::Approx(ref[i].b).epsilon(1e-13));
    }
  }
}

TEST_CASE("bounded inputs give bounded states") {
  Rng rng(11);
  const SsmParams p = random_params(2, 3, rng);
  ScanCache cache;
  const Tensor x = rand_tensor({300, 2}, rng);
  selective_scan_forward(x, p, cache);
  double max_abar = 0, max_drive = 0, max_h = 0;
  const std::size_t l = 300, c = 2, n = 3;
  for (std::size_t k = 0; k < l; ++k)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t i = (k * c + ch) * n + j;
        max_abar = std::max(max_abar, cache.dp.abar[i]);
        max_drive = std::max(max_drive, std::fabs(cache.dp.bbar[i] * x.at(k, ch)));
        max_h = std::max(max_h, std::fabs(cache.h[i]));
      }
  CHECK(max_abar < 1.0);
  CHECK(max_h <= max_drive / (1.0 - max_abar) * (1 + 1e-12));
}

TEST_CASE("channel permutation equivariance") {
  Rng rng(12);
  const std::size_t c = 4, n = 3, l = 20;
  const SsmParams p = random_params(c, n, rng);
  const Tensor x = rand_tensor({l, c}, rng);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  SsmParams q = p;
  Tensor xp({l, c});
  for (std::size_t i = 0; i < c; ++i) {
    q.d[i] = p.d[perm[i]];
    q.delta_b[i] = p.delta_b[perm[i]];
    for (std::size_t j = 0; j < n; ++j) {
      q.a_log.at(i, j) = p.a_log.at(perm[i], j);
      q.b_w.at(i, j) = p.b_w.at(perm[i], j);
      q.c_w.at(i, j) = p.c_w.at(perm[i], j);
    }
    for (std::size_t j = 0; j < c; ++j) q.delta_w.at(i, j) = p.delta_w.at(perm[i], perm[j]);
    for (std::size_t k = 0; k < l; ++k) xp.at(k, i) = x.at(k, perm[i]);
  }
  const Tensor y = selective_scan_seq(x, p), yp = selective_scan_seq(xp, q);
  for (std::size_t k = 0; k < l; ++k)
    for (std::size_t i = 0; i < c; ++i) CHECK(yp.at(k, i) == doctest::Approx(y.at(k, perm[i])).epsilon(1e-13));
}

TEST_CASE("selective_scan_vjp") {
  Rng rng(13);
  const SsmParams p = random_params(3, 4, rng);
  const Tensor x = rand_tensor({16, 3}, rng);
  SUBCASE("zero upstream") {
    const ScanGrads g = selective_scan_vjp(x, p, Tensor({16, 3}));
    for (double v : g.dx.data()) CHECK(v == 0.0);
    for (auto& [name, t] : g.dp.named())
      for (double v : t->data()) CHECK(v == 0.0);
  }
  SUBCASE("dD is the upstream-input correlation") {
    const Tensor gy = rand_tensor({16, 3}, rng);
    const ScanGrads g = selective_scan_vjp(x, p, gy);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      double expect = 0;
      for (std::size_t k = 0; k < 16; ++k) expect += gy.at(k, ch) * x.at(k, ch);
      CHECK(g.dp.d[ch] == doctest::Approx(expect).epsilon(1e-13));
    }
  }
  SUBCASE("finite-difference check, L=16 C=3 N=4") {
    auto unpack = [](const std::vector<Tensor>& in) {
      return SsmParams{in[1], in[2], in[3], in[4], in[5], in[6]};
    };
    const ForwardFn f = [&](const std::vector<Tensor>& in) { return selective_scan_seq(in[0], unpack(in)); };
    const VjpFn vjp = [&](const std::vector<Tensor>& in, const Tensor& gy) {
      const ScanGrads g = selective_scan_vjp(in[0], unpack(in), gy);
      return std::vector<Tensor>{g.dx, g.dp.a_log, g.dp.d, g.dp.delta_w, g.dp.delta_b, g.dp.b_w, g.dp.c_w};
    };
    const auto rep = grad_check("selective_scan", f, vjp, {x, p.a_log, p.d, p.delta_w, p.delta_b, p.b_w, p.c_w},
                                {.tol = 1e-4});
    INFO(format_report(rep));
    CHECK(rep.pass);
  }
  SUBCASE("series branch gradients") {
    SsmParams tiny = p;
    tiny.a_log = rand_tensor({3, 4}, rng, -13, -11);  // |A| ~ 1e-5, so |delta A| < 1e-4
    const ForwardFn f = [&](const std::vector<Tensor>& in) {
      SsmParams q = tiny;
      q.a_log = in[1];
      return selective_scan_seq(in[0], q);
    };
    const VjpFn vjp = [&](const std::vector<Tensor>& in, const Tensor& gy) {
      SsmParams q = tiny;
      q.a_log = in[1];
      const ScanGrads g = selective_scan_vjp(in[0], q, gy);
      return std::vector<Tensor>{g.dx, g.dp.a_log};
    };
    const auto rep = grad_check("selective_scan_series", f, vjp, {x, tiny.a_log}, {.tol = 1e-4});
    INFO(format_report(rep));
    CHECK(rep.pass);
  }
}
