#pragma once

#include <cstddef>
#include <vector>

#include "ekd/nn.hpp"

namespace ekd::train {

/// lr_initial * factor^(number of decay epochs <= epoch), rounded to 15 significant digits.
double lr_at(std::size_t epoch, double lr_initial, const std::vector<std::size_t>& decay_epochs,
             double decay_factor);

template <typename T>
struct SgdState {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  // One buffer per parameter, in parameter order.
  std::vector<std::vector<T>> velocity;

  static SgdState for_params(const std::vector<nn::NamedTensor<T>>& params, double lr,
                             double momentum, double weight_decay);
};

/// v <- momentum * v + (grad + wd * param); param <- param - lr * v; grads cleared.
///
/// Weight decay applies to `weight` tensors only, never to `norm` ones.
/// Every parameter must carry a gradient.
template <typename T>
void sgd_step(const std::vector<nn::NamedTensor<T>>& params, SgdState<T>& state);

}  // namespace ekd::train
