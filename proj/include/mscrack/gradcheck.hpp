#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mscrack/tensor.hpp"

namespace mscrack {

struct GradCheckInputError {
  std::size_t input = 0;
  std::size_t checked = 0;  // number of coordinates compared
  double max_rel_error = 0;
};

struct GradCheckReport {
  std::string op;
  double max_rel_error = 0;
  double tolerance = 0;
  std::vector<GradCheckInputError> per_input;
  bool pass = false;
  std::string diagnostic;
};

using ForwardFn = std::function<Tensor(const std::vector<Tensor>&)>;
// Returns one cotangent per input, given the inputs and the output cotangent.
using VjpFn = std::function<std::vector<Tensor>(const std::vector<Tensor>&, const Tensor&)>;

struct GradCheckOptions {
  double tol = 1e-5;
  std::uint64_t seed = 1234;
  // Per-input coordinate budget; 0 checks every coordinate. Larger inputs are
  // probed on a fixed-seed random subset.
  std::size_t max_coords_per_input = 0;
  // Inputs whose index appears here are held fixed (not differentiated).
  std::vector<std::size_t> skip_inputs;
};

// Compares the analytic VJP against central finite differences of the scalar
// <r, f(x)> for a fixed-seed random cotangent r. Per-coordinate error is
// |a - n| / max(|a|, |n|, 1e-3 * max_j |n_j|, 1e-10, noise), where noise is the
// rounding resolution of the difference quotient, 1e4 * eps * sum_i |r_i f_i| / h.
GradCheckReport grad_check(const std::string& op, const ForwardFn& f, const VjpFn& vjp,
                           std::vector<Tensor> inputs, const GradCheckOptions& opts = {});

std::string format_report(const GradCheckReport& r);

}  // namespace mscrack
