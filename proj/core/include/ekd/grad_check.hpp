#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "ekd/tensor.hpp"

namespace ekd::ad {

struct GradCheckOptions {
  double step = 1e-4;
  double tolerance = 1e-5;
  // Relative error is |a - n| / max(|a|, |n|, denominator_floor).
  double denominator_floor = 1e-3;
  // A failing component is treated as non-differentiable when its one-sided
  // difference quotients disagree by more than this fraction.
  double kink_threshold = 1e-2;
};

struct GradCheckEntry {
  std::size_t input = 0;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double relative_error = 0;
  bool excluded = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_relative_error = 0;
  std::size_t checked = 0;
  std::size_t excluded = 0;
  bool passed = false;

  const GradCheckEntry* worst() const;
  std::string summary() const;
};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences, component by component.
///
/// `inputs` must be leaves; they are perturbed in place and restored. Points
/// where the function has a kink (relu at 0, max-pool ties) are detected from
/// disagreeing one-sided quotients and reported as excluded rather than failed.
template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> inputs,
                           GradCheckOptions options = {});

}  // namespace ekd::ad
