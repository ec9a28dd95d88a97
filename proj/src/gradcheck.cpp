#include "mscrack/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "mscrack/random.hpp"

namespace mscrack {

namespace {

double project(const Tensor& y, const Tensor& r) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
  return s;
}

double project_abs(const Tensor& y, const Tensor& r) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += std::fabs(y[i] * r[i]);
  return s;
}

// Rounding noise of a central difference, in units of eps * sum|r_i y_i| / h.
constexpr double kRoundoffFactor = 1e4;

}  // namespace

GradCheckReport grad_check(const std::string& op, const ForwardFn& f, const VjpFn& vjp,
                           std::vector<Tensor> inputs, const GradCheckOptions& opts) {
  GradCheckReport rep;
  rep.op = op;
  rep.tolerance = opts.tol;

  const Tensor y0 = f(inputs);
  Rng rng(opts.seed, "gradcheck-cotangent");
  const Tensor r = uniform_tensor(y0.shape(), rng, -1.0, 1.0);
  const std::vector<Tensor> analytic = vjp(inputs, r);
  if (analytic.size() != inputs.size()) {
    rep.diagnostic = "vjp returned " + std::to_string(analytic.size()) + " cotangents for " +
                     std::to_string(inputs.size()) + " inputs";
    return rep;
  }

  const double eps = std::numeric_limits<double>::epsilon();
  const double step = std::cbrt(eps);
  const double magnitude = project_abs(y0, r);
  Rng pick(opts.seed, "gradcheck-coords");
  bool ok = true;
  for (std::size_t in = 0; in < inputs.size(); ++in) {
    if (std::find(opts.skip_inputs.begin(), opts.skip_inputs.end(), in) != opts.skip_inputs.end()) {
      continue;
    }
    Tensor& x = inputs[in];
    if (analytic[in].shape() != x.shape()) {
      rep.diagnostic = "cotangent " + std::to_string(in) + " has shape " +
                       shape_str(analytic[in].shape()) + ", input has " + shape_str(x.shape());
      return rep;
    }
    std::vector<std::size_t> coords(x.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (opts.max_coords_per_input && coords.size() > opts.max_coords_per_input) {
      for (std::size_t i = 0; i < opts.max_coords_per_input; ++i) {
        std::swap(coords[i], coords[i + pick.below(coords.size() - i)]);
      }
      coords.resize(opts.max_coords_per_input);
    }
    std::vector<double> numeric(coords.size()), noise(coords.size());
    double nmax = 0;
    for (std::size_t c = 0; c < coords.size(); ++c) {
      const std::size_t i = coords[c];
      const double orig = x[i];
      const double h = step * std::max(1.0, std::fabs(orig));
      x[i] = orig + h;
      const double fp = project(f(inputs), r);
      x[i] = orig - h;
      const double fm = project(f(inputs), r);
      x[i] = orig;
      numeric[c] = (fp - fm) / (2.0 * h);
      noise[c] = kRoundoffFactor * eps * magnitude / h;
      nmax = std::max(nmax, std::fabs(numeric[c]));
    }
    GradCheckInputError row{in, coords.size(), 0.0};
    const double floor = std::max(1e-3 * nmax, 1e-10);
    for (std::size_t c = 0; c < coords.size(); ++c) {
      const double a = analytic[in][coords[c]];
      const double n = numeric[c];
      if (!std::isfinite(a) || !std::isfinite(n)) {
        rep.diagnostic = "non-finite gradient at input " + std::to_string(in) + " coordinate " +
                         std::to_string(coords[c]) + " (analytic " + std::to_string(a) +
                         ", numeric " + std::to_string(n) + ")";
        ok = false;
        row.max_rel_error = std::numeric_limits<double>::infinity();
        break;
      }
      const double err = std::fabs(a - n) / std::max({std::fabs(a), std::fabs(n), floor, noise[c]});
      row.max_rel_error = std::max(row.max_rel_error, err);
    }
    rep.max_rel_error = std::max(rep.max_rel_error, row.max_rel_error);
    rep.per_input.push_back(row);
  }
  rep.pass = ok && rep.max_rel_error <= opts.tol;
  return rep;
}

std::string format_report(const GradCheckReport& r) {
  std::ostringstream os;
  os << (r.pass ? "PASS " : "FAIL ") << r.op << " max_rel_err=" << r.max_rel_error
     << " tol=" << r.tolerance;
  for (const auto& row : r.per_input) {
    os << " [in" << row.input << " n=" << row.checked << " err=" << row.max_rel_error << "]";
  }
  if (!r.diagnostic.empty()) os << " : " << r.diagnostic;
  return os.str();
}

}  // namespace mscrack
