#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mscrack/tensor.hpp"

namespace mscrack {

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamState {
  std::vector<Tensor> m, v;  // one per parameter, same order as the ParamList
  std::size_t step = 0;

  static AdamState zeros_for(const ConstParamList& params);
};

// theta <- theta - lr * mhat / (sqrt(vhat) + eps) - lr * wd * theta
// Throws before touching any parameter if a gradient is non-finite.
void adamw_step(const ParamList& params, const ConstParamList& grads, AdamState& state, double lr,
                const AdamWHyper& hyper = {});

// Scales all gradients so their global L2 norm is at most max_norm; returns the norm before scaling.
double clip_grad_norm(const ParamList& grads, double max_norm);

}  // namespace mscrack
