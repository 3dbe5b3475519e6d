#include "ekd/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ekd::ad {

const GradCheckEntry* GradCheckReport::worst() const {
  const GradCheckEntry* best = nullptr;
  for (const auto& e : entries) {
    if (e.excluded) continue;
    if (!best || e.relative_error > best->relative_error) best = &e;
  }
  return best;
}

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << (passed ? "pass" : "FAIL") << ": checked " << checked << ", excluded " << excluded
     << ", max rel err " << max_relative_error;
  if (const auto* w = worst()) {
    os << " (input " << w->input << " [" << w->index << "] analytic " << w->analytic
       << " numeric " << w->numeric << ")";
  }
  return os.str();
}

template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> inputs,
                           GradCheckOptions options) {
  for (auto& in : inputs) {
    if (!in.is_leaf()) throw ContractError("grad_check: inputs must be leaves");
    in.set_requires_grad(true);
    in.clear_grad();
  }
  {
    Tensor<T> root = f();
    backward(root);
  }
  std::vector<std::vector<T>> analytic;
  analytic.reserve(inputs.size());
  for (auto& in : inputs) {
    if (in.has_grad()) {
      analytic.emplace_back(in.grad().begin(), in.grad().end());
    } else {
      analytic.emplace_back(in.numel(), T(0));
    }
    in.clear_grad();
  }

  auto evaluate = [&]() -> double {
    NoGradScope no_grad;
    return static_cast<double>(f().item());
  };

  GradCheckReport report;
  const double h = options.step;
  const double f0 = evaluate();
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto values = inputs[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T original = values[i];
      values[i] = static_cast<T>(original + h);
      const double plus = evaluate();
      values[i] = static_cast<T>(original - h);
      const double minus = evaluate();
      values[i] = original;

      GradCheckEntry e;
      e.input = k;
      e.index = i;
      e.analytic = static_cast<double>(analytic[k][i]);
      e.numeric = (plus - minus) / (2 * h);
      const double forward = (plus - f0) / h;
      const double backward_q = (f0 - minus) / h;
      const double denom =
          std::max({std::abs(e.analytic), std::abs(e.numeric), options.denominator_floor});
      e.relative_error = std::abs(e.analytic - e.numeric) / denom;
      // Only a mismatching component can be excluded, and only when the
      // one-sided quotients show a jump in the derivative within the step.
      const double scale = std::max({std::abs(forward), std::abs(backward_q),
                                     options.denominator_floor});
      e.excluded = e.relative_error >= options.tolerance &&
                   std::abs(forward - backward_q) / scale > options.kink_threshold;
      if (e.excluded) {
        ++report.excluded;
      } else {
        ++report.checked;
        report.max_relative_error = std::max(report.max_relative_error, e.relative_error);
      }
      report.entries.push_back(e);
    }
  }
  report.passed = report.max_relative_error < options.tolerance;
  return report;
}

template GradCheckReport grad_check(const std::function<Tensor<float>()>&,
                                    std::vector<Tensor<float>>, GradCheckOptions);
template GradCheckReport grad_check(const std::function<Tensor<double>()>&,
                                    std::vector<Tensor<double>>, GradCheckOptions);

}  // namespace ekd::ad
