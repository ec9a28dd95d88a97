#include "mscrack/optim.hpp"

#include <cmath>

namespace mscrack {

AdamState AdamState::zeros_for(const ConstParamList& params) {
  AdamState s;
  for (const auto& [name, t] : params) {
    s.m.emplace_back(t->shape());
    s.v.emplace_back(t->shape());
  }
  return s;
}

void adamw_step(const ParamList& params, const ConstParamList& grads, AdamState& state, double lr,
                const AdamWHyper& hyper) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw Error("adamw_step: " + std::to_string(params.size()) + " parameters, " +
                std::to_string(grads.size()) + " gradients, " + std::to_string(state.m.size()) +
                " moment slots");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& g = *grads[i].second;
    if (g.shape() != params[i].second->shape() || state.m[i].shape() != g.shape()) {
      throw ShapeError("adamw_step: shape mismatch for " + params[i].first);
    }
    if (!g.all_finite()) throw Error("adamw_step: non-finite gradient for parameter " + params[i].first);
  }
  ++state.step;
  const double t = double(state.step);
  const double c1 = 1.0 - std::pow(hyper.beta1, t);
  const double c2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i].second;
    const Tensor& g = *grads[i].second;
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * g[k];
      v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * g[k] * g[k];
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + hyper.eps) + lr * hyper.weight_decay * p[k];
    }
  }
}

double clip_grad_norm(const ParamList& grads, double max_norm) {
  double sq = 0;
  for (const auto& [name, g] : grads)
    for (double v : g->data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    for (const auto& [name, g] : grads) *g *= max_norm / norm;
  }
  return norm;
}

}  // namespace mscrack
