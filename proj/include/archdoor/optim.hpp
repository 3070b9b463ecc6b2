#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "archdoor/autograd.hpp"
#include "archdoor/tensor.hpp"

namespace archdoor {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment buffers, one pair per parameter tensor.
struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;

  static AdamState for_params(std::span<const Tensor> params);
  static AdamState for_params(std::span<const ag::Var> params);
};

/// One bias-corrected Adam update in place. Throws ShapeError when the
/// parameter, gradient and state lists disagree.
void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state, double lr,
               const AdamHyper& hyper = {});

/// Same update using each parameter's accumulated gradient.
void adam_step(std::span<const ag::Var> params, AdamState& state, double lr, const AdamHyper& hyper = {});

}  // namespace archdoor
