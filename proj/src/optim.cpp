#include "archdoor/optim.hpp"

#include <cmath>

#include "archdoor/error.hpp"

namespace archdoor {

AdamState AdamState::for_params(std::span<const Tensor> params) {
  AdamState state;
  for (const auto& p : params) {
    state.m.emplace_back(p.shape());
    state.v.emplace_back(p.shape());
  }
  return state;
}

AdamState AdamState::for_params(std::span<const ag::Var> params) {
  AdamState state;
  for (const auto& p : params) {
    state.m.emplace_back(p.shape());
    state.v.emplace_back(p.shape());
  }
  return state;
}

namespace {

void update(std::vector<Tensor*> params, std::vector<const Tensor*> grads, AdamState& state, double lr,
            const AdamHyper& hyper) {
  if (!(lr > 0)) throw DomainError("adam_step: learning rate must be > 0");
  if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.v.size())
    throw ShapeError("adam_step: parameter, gradient and state counts differ");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i]->shape() != grads[i]->shape() || params[i]->shape() != state.m[i].shape() ||
        params[i]->shape() != state.v[i].shape())
      throw ShapeError("adam_step: shape mismatch for parameter " + std::to_string(i) + " " +
                       shape_string(params[i]->shape()));

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1 - std::pow(hyper.beta1, t);
  const double correction2 = 1 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i]->data();
    auto g = grads[i]->data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = hyper.beta1 * m[j] + (1 - hyper.beta1) * g[j];
      v[j] = hyper.beta2 * v[j] + (1 - hyper.beta2) * g[j] * g[j];
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      w[j] -= lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
    }
  }
}

}  // namespace

void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state, double lr,
               const AdamHyper& hyper) {
  std::vector<Tensor*> p;
  std::vector<const Tensor*> g;
  for (auto& t : params) p.push_back(&t);
  for (auto& t : grads) g.push_back(&t);
  update(std::move(p), std::move(g), state, lr, hyper);
}

void adam_step(std::span<const ag::Var> params, AdamState& state, double lr, const AdamHyper& hyper) {
  std::vector<Tensor*> p;
  std::vector<const Tensor*> g;
  for (auto v : params) {
    p.push_back(&v.value());
    g.push_back(&v.grad());
  }
  update(std::move(p), std::move(g), state, lr, hyper);
}

}  // namespace archdoor
