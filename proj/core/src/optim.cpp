#include "ekd/optim.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>

namespace ekd::train {

double lr_at(std::size_t epoch, double lr_initial, const std::vector<std::size_t>& decay_epochs,
             double decay_factor) {
  double lr = lr_initial;
  for (auto e : decay_epochs)
    if (e <= epoch) lr *= decay_factor;
  // Snap to 15 significant digits so 0.1 * 0.1 yields the double nearest 0.01.
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.15g", lr);
  return std::strtod(buf, nullptr);
}

template <typename T>
SgdState<T> SgdState<T>::for_params(const std::vector<nn::NamedTensor<T>>& params, double lr,
                                    double momentum, double weight_decay) {
  SgdState s;
  s.lr = lr;
  s.momentum = momentum;
  s.weight_decay = weight_decay;
  for (const auto& p : params) s.velocity.emplace_back(p.tensor.numel(), T(0));
  return s;
}

template <typename T>
void sgd_step(const std::vector<nn::NamedTensor<T>>& params, SgdState<T>& state) {
  if (state.velocity.size() != params.size()) {
    throw ad::ContractError("sgd_step: optimizer state tracks " +
                            std::to_string(state.velocity.size()) + " parameters, got " +
                            std::to_string(params.size()));
  }
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) {
      throw ad::ContractError("sgd_step: parameter '" + p.name + "' has no gradient");
    }
  }
  const T lr = static_cast<T>(state.lr);
  const T mom = static_cast<T>(state.momentum);
  for (std::size_t k = 0; k < params.size(); ++k) {
    ad::Tensor<T> t = params[k].tensor;
    const T wd = params[k].role == nn::TensorRole::weight ? static_cast<T>(state.weight_decay) : T(0);
    auto value = t.mutable_data();
    const auto grad = t.grad();
    auto& v = state.velocity[k];
    if (v.size() != value.size()) {
      throw ad::ContractError("sgd_step: velocity for '" + params[k].name + "' has wrong size");
    }
    for (std::size_t i = 0; i < value.size(); ++i) {
      v[i] = mom * v[i] + (grad[i] + wd * value[i]);
      value[i] -= lr * v[i];
      if (!std::isfinite(value[i])) {
        throw ad::NumericError("sgd_step: parameter '" + params[k].name + "' became non-finite");
      }
    }
    t.clear_grad();
  }
}

template struct SgdState<float>;
template struct SgdState<double>;
template void sgd_step(const std::vector<nn::NamedTensor<float>>&, SgdState<float>&);
template void sgd_step(const std::vector<nn::NamedTensor<double>>&, SgdState<double>&);

}  // namespace ekd::train
