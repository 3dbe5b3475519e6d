#pragma once

#include <cstddef>
#include <vector>

#include "ekd/tensor.hpp"

namespace ekd::ad {

// Elementwise (shapes must match exactly).
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scalar_mul(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> relu(const Tensor<T>& x);

/// [rows, k] x [k, cols] -> [rows, cols].
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Adds a [features] bias to every row of a [batch, features] tensor.
template <typename T> Tensor<T> bias_add(const Tensor<T>& x, const Tensor<T>& bias);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// input [N, Cin, H, W], kernel [Cout, Cin, kh, kw] -> [N, Cout, Ho, Wo].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, Conv2dOptions options = {});

/// Output spatial extent of a convolution or pooling window.
std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                             std::size_t padding);

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride);
/// [N, C, H, W] -> [N, C].
template <typename T> Tensor<T> global_avg_pool2d(const Tensor<T>& x);
/// [N, ...] -> [N, prod(...)].
template <typename T> Tensor<T> flatten(const Tensor<T>& x);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);

template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
/// Max-shifted log-softmax; never takes the log of a probability.
template <typename T> Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis);

/// Reduces over `axes` (removed from the result). Empty `axes` reduces everything.
template <typename T> Tensor<T> sum(const Tensor<T>& x, const std::vector<std::size_t>& axes = {});
template <typename T> Tensor<T> mean(const Tensor<T>& x, const std::vector<std::size_t>& axes = {});

/// Running statistics owned by a batch-norm layer. Not differentiable.
template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

struct BatchNormOptions {
  bool training = true;
  // In training mode, whether the running statistics absorb this batch.
  bool update_stats = true;
  // running <- momentum * running + (1 - momentum) * batch
  double momentum = 0.9;
  double eps = 1e-5;
};

/// x [N, C, H, W]; scale, shift [C].
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift,
                       BatchNormStats<T>& stats, BatchNormOptions options = {});

}  // namespace ekd::ad
