#include "ekd/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <memory>
#include <string>

namespace ekd::ad {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
void check_finite(const std::vector<T>& values, const char* op) {
  for (const T v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": produced a non-finite value");
    }
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <typename T>
void require_rank(const Tensor<T>& x, std::size_t rank, const char* op, const char* what) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + shape_str(x.shape()));
  }
}

// Builds the output node; records it when any input is tracked and recording is on.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values,
                      std::vector<std::shared_ptr<Node<T>>> inputs,
                      std::function<void(Node<T>&)> rule) {
  check_finite(values, op);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->op = op;
  bool track = false;
  if (grad_recording_enabled()) {
    for (const auto& in : inputs) track = track || in->requires_grad;
  }
  if (track) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(rule);
  }
  return Tensor<T>(std::move(node));
}

// Uninitialized buffer for values that are fully overwritten before use.
template <typename T>
std::unique_ptr<T[]> scratch(std::size_t n) {
  return std::unique_ptr<T[]>(new T[n]);
}

template <typename T>
void accumulate_if(Node<T>& input, std::span<const T> g) {
  if (input.requires_grad) input.accumulate(g);
}

// Splits a shape around `axis` into (outer, extent, inner).
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                             std::size_t padding) {
  if (stride == 0) throw ShapeError("stride must be positive");
  if (in + 2 * padding < kernel) {
    throw ShapeError("window of size " + std::to_string(kernel) + " exceeds padded input " +
                     std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result<T>("add", a.shape(), std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    accumulate_if<T>(*self.inputs[0], self.grad);
    accumulate_if<T>(*self.inputs[1], self.grad);
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result<T>("sub", a.shape(), std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    accumulate_if<T>(*self.inputs[0], self.grad);
    if (self.inputs[1]->requires_grad) {
      std::vector<T> g(self.grad.size());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = -self.grad[i];
      self.inputs[1]->accumulate(g);
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result<T>("mul", a.shape(), std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    Node<T>& lhs = *self.inputs[0];
    Node<T>& rhs = *self.inputs[1];
    const std::size_t n = self.grad.size();
    if (lhs.requires_grad) {
      std::vector<T> g(n);
      for (std::size_t i = 0; i < n; ++i) g[i] = self.grad[i] * rhs.data[i];
      lhs.accumulate(g);
    }
    if (rhs.requires_grad) {
      std::vector<T> g(n);
      for (std::size_t i = 0; i < n; ++i) g[i] = self.grad[i] * lhs.data[i];
      rhs.accumulate(g);
    }
  });
}

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return make_result<T>("scalar_mul", a.shape(), std::move(out), {a.node()},
                        [factor](Node<T>& self) {
                          std::vector<T> g(self.grad.size());
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * factor;
                          self.inputs[0]->accumulate(g);
                        });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] > T(0) ? v[i] : T(0);
  return make_result<T>("relu", x.shape(), std::move(out), {x.node()}, [](Node<T>& self) {
    const auto& in = self.inputs[0]->data;
    std::vector<T> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = in[i] > T(0) ? self.grad[i] : T(0);
    self.inputs[0]->accumulate(g);
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul", "lhs");
  require_rank(b, 2, "matmul", "rhs");
  const std::size_t rows = a.dim(0), inner = a.dim(1), cols = b.dim(1);
  if (b.dim(0) != inner) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<T> out(rows * cols);
  MapMat<T>(out.data(), rows, cols).noalias() =
      ConstMapMat<T>(a.data().data(), rows, inner) * ConstMapMat<T>(b.data().data(), inner, cols);
  return make_result<T>(
      "matmul", {rows, cols}, std::move(out), {a.node(), b.node()},
      [rows, inner, cols](Node<T>& self) {
        Node<T>& lhs = *self.inputs[0];
        Node<T>& rhs = *self.inputs[1];
        ConstMapMat<T> dy(self.grad.data(), rows, cols);
        if (lhs.requires_grad) {
          std::vector<T> g(rows * inner);
          MapMat<T>(g.data(), rows, inner).noalias() =
              dy * ConstMapMat<T>(rhs.data.data(), inner, cols).transpose();
          lhs.accumulate(g);
        }
        if (rhs.requires_grad) {
          std::vector<T> g(inner * cols);
          MapMat<T>(g.data(), inner, cols).noalias() =
              ConstMapMat<T>(lhs.data.data(), rows, inner).transpose() * dy;
          rhs.accumulate(g);
        }
      });
}

template <typename T>
Tensor<T> bias_add(const Tensor<T>& x, const Tensor<T>& bias) {
  require_rank(x, 2, "bias_add", "input");
  require_rank(bias, 1, "bias_add", "bias");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (bias.dim(0) != cols) {
    throw ShapeError("bias_add: bias " + shape_str(bias.shape()) + " does not match input " +
                     shape_str(x.shape()));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  const auto b = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += b[c];
  return make_result<T>("bias_add", x.shape(), std::move(out), {x.node(), bias.node()},
                        [rows, cols](Node<T>& self) {
                          accumulate_if<T>(*self.inputs[0], self.grad);
                          if (self.inputs[1]->requires_grad) {
                            std::vector<T> g(cols, T(0));
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t c = 0; c < cols; ++c) g[c] += self.grad[r * cols + c];
                            self.inputs[1]->accumulate(g);
                          }
                        });
}

namespace {

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t positions() const { return n * ho * wo; }
};

// cols[(c*kh + i)*kw + j, (b*ho + y)*wo + x] = input[b, c, y*s + i - p, x*s + j - p]
template <typename T>
void im2col(const T* input, const ConvGeometry& g, T* cols) {
  const std::size_t npos = g.positions();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = cols + ((c * g.kh + i) * g.kw + j) * npos;
        for (std::size_t b = 0; b < g.n; ++b) {
          const T* plane = input + (b * g.cin + c) * g.h * g.w;
          for (std::size_t y = 0; y < g.ho; ++y) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.stride + i) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            T* dst = row + (b * g.ho + y) * g.wo;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
              std::fill(dst, dst + g.wo, T(0));
              continue;
            }
            const T* src = plane + static_cast<std::size_t>(iy) * g.w;
            for (std::size_t x = 0; x < g.wo; ++x) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * g.stride + j) -
                                        static_cast<std::ptrdiff_t>(g.pad);
              dst[x] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? T(0) : src[ix];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* input_grad) {
  const std::size_t npos = g.positions();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = cols + ((c * g.kh + i) * g.kw + j) * npos;
        for (std::size_t b = 0; b < g.n; ++b) {
          T* plane = input_grad + (b * g.cin + c) * g.h * g.w;
          for (std::size_t y = 0; y < g.ho; ++y) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.stride + i) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            const T* src = row + (b * g.ho + y) * g.wo;
            T* dst = plane + static_cast<std::size_t>(iy) * g.w;
            for (std::size_t x = 0; x < g.wo; ++x) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * g.stride + j) -
                                        static_cast<std::ptrdiff_t>(g.pad);
              if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[x];
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, Conv2dOptions options) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(kernel, 4, "conv2d", "kernel");
  if (kernel.dim(1) != input.dim(1)) {
    throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) + " expects " +
                     std::to_string(kernel.dim(1)) + " input channels, input " +
                     shape_str(input.shape()) + " has " + std::to_string(input.dim(1)));
  }
  ConvGeometry g{};
  g.n = input.dim(0);
  g.cin = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.cout = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.stride = options.stride;
  g.pad = options.padding;
  g.ho = conv_output_size(g.h, g.kh, g.stride, g.pad);
  g.wo = conv_output_size(g.w, g.kw, g.stride, g.pad);

  const std::size_t K = g.patch();
  const std::size_t P = g.positions();
  const std::size_t hw = g.ho * g.wo;
  std::shared_ptr<T[]> cols(new T[K * P]);
  im2col(input.data().data(), g, cols.get());

  // [Cout, K] x [K, N*Ho*Wo], then scatter columns back to NCHW.
  const auto prod = scratch<T>(g.cout * P);
  MapMat<T>(prod.get(), g.cout, P).noalias() =
      ConstMapMat<T>(kernel.data().data(), g.cout, K) * ConstMapMat<T>(cols.get(), K, P);
  std::vector<T> out(g.n * g.cout * hw);
  for (std::size_t co = 0; co < g.cout; ++co)
    for (std::size_t b = 0; b < g.n; ++b)
      std::copy_n(prod.get() + co * P + b * hw, hw, out.data() + (b * g.cout + co) * hw);

  return make_result<T>(
      "conv2d", {g.n, g.cout, g.ho, g.wo}, std::move(out), {input.node(), kernel.node()},
      [g, cols](Node<T>& self) {
        const std::size_t K = g.patch();
        const std::size_t P = g.positions();
        const std::size_t hw = g.ho * g.wo;
        const auto dy = scratch<T>(g.cout * P);
        for (std::size_t co = 0; co < g.cout; ++co)
          for (std::size_t b = 0; b < g.n; ++b)
            std::copy_n(self.grad.data() + (b * g.cout + co) * hw, hw, dy.get() + co * P + b * hw);
        ConstMapMat<T> dy_mat(dy.get(), g.cout, P);
        Node<T>& in = *self.inputs[0];
        Node<T>& ker = *self.inputs[1];
        if (ker.requires_grad) {
          std::vector<T> gk(g.cout * K);
          MapMat<T>(gk.data(), g.cout, K).noalias() =
              dy_mat * ConstMapMat<T>(cols.get(), K, P).transpose();
          ker.accumulate(gk);
        }
        if (in.requires_grad) {
          const auto dcols = scratch<T>(K * P);
          MapMat<T>(dcols.get(), K, P).noalias() =
              ConstMapMat<T>(ker.data.data(), g.cout, K).transpose() * dy_mat;
          std::vector<T> gi(g.n * g.cin * g.h * g.w, T(0));
          col2im(dcols.get(), g, gi.data());
          in.accumulate(gi);
        }
      });
}

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride) {
  require_rank(x, 4, "max_pool2d", "input");
  if (kernel == 0) throw ShapeError("max_pool2d: kernel must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = conv_output_size(h, kernel, stride, 0);
  const std::size_t wo = conv_output_size(w, kernel, stride, 0);
  std::vector<T> out(n * c * ho * wo);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const auto in = x.data();
  for (std::size_t p = 0; p < n * c; ++p) {
    const std::size_t base = p * h * w;
    for (std::size_t y = 0; y < ho; ++y) {
      for (std::size_t xo = 0; xo < wo; ++xo) {
        std::size_t best = base + (y * stride) * w + xo * stride;
        for (std::size_t i = 0; i < kernel; ++i) {
          for (std::size_t j = 0; j < kernel; ++j) {
            const std::size_t idx = base + (y * stride + i) * w + xo * stride + j;
            if (in[idx] > in[best]) best = idx;
          }
        }
        const std::size_t o = (p * ho + y) * wo + xo;
        out[o] = in[best];
        (*argmax)[o] = best;
      }
    }
  }
  const std::size_t in_numel = x.numel();
  return make_result<T>("max_pool2d", {n, c, ho, wo}, std::move(out), {x.node()},
                        [argmax, in_numel](Node<T>& self) {
                          std::vector<T> g(in_numel, T(0));
                          for (std::size_t o = 0; o < self.grad.size(); ++o)
                            g[(*argmax)[o]] += self.grad[o];
                          self.inputs[0]->accumulate(g);
                        });
}

template <typename T>
Tensor<T> global_avg_pool2d(const Tensor<T>& x) {
  require_rank(x, 4, "global_avg_pool2d", "input");
  const std::size_t nc = x.dim(0) * x.dim(1);
  const std::size_t hw = x.dim(2) * x.dim(3);
  std::vector<T> out(nc);
  const auto in = x.data();
  for (std::size_t p = 0; p < nc; ++p) {
    T acc = 0;
    for (std::size_t k = 0; k < hw; ++k) acc += in[p * hw + k];
    out[p] = acc / static_cast<T>(hw);
  }
  return make_result<T>("global_avg_pool2d", {x.dim(0), x.dim(1)}, std::move(out), {x.node()},
                        [nc, hw](Node<T>& self) {
                          std::vector<T> g(nc * hw);
                          for (std::size_t p = 0; p < nc; ++p) {
                            const T v = self.grad[p] / static_cast<T>(hw);
                            std::fill_n(g.data() + p * hw, hw, v);
                          }
                          self.inputs[0]->accumulate(g);
                        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {x.node()},
                        [](Node<T>& self) { self.inputs[0]->accumulate(self.grad); });
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& x) {
  if (x.rank() < 1) throw ShapeError("flatten: needs a batch axis");
  const std::size_t n = x.dim(0);
  return reshape(x, {n, n == 0 ? 0 : x.numel() / n});
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis, "softmax");
  std::vector<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < s.extent; ++k) mx = std::max(mx, in[base + k * s.inner]);
      T total = 0;
      for (std::size_t k = 0; k < s.extent; ++k) {
        const T e = std::exp(in[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] /= total;
    }
  }
  return make_result<T>("softmax", x.shape(), std::move(out), {x.node()}, [s](Node<T>& self) {
    const auto& y = self.data;
    std::vector<T> g(y.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        T dot = 0;
        for (std::size_t k = 0; k < s.extent; ++k)
          dot += self.grad[base + k * s.inner] * y[base + k * s.inner];
        for (std::size_t k = 0; k < s.extent; ++k) {
          const std::size_t idx = base + k * s.inner;
          g[idx] = y[idx] * (self.grad[idx] - dot);
        }
      }
    }
    self.inputs[0]->accumulate(g);
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis, "log_softmax");
  std::vector<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < s.extent; ++k) mx = std::max(mx, in[base + k * s.inner]);
      T total = 0;
      for (std::size_t k = 0; k < s.extent; ++k) total += std::exp(in[base + k * s.inner] - mx);
      const T log_norm = mx + std::log(total);
      for (std::size_t k = 0; k < s.extent; ++k)
        out[base + k * s.inner] = in[base + k * s.inner] - log_norm;
    }
  }
  return make_result<T>("log_softmax", x.shape(), std::move(out), {x.node()}, [s](Node<T>& self) {
    const auto& y = self.data;
    std::vector<T> g(y.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        T total = 0;
        for (std::size_t k = 0; k < s.extent; ++k) total += self.grad[base + k * s.inner];
        for (std::size_t k = 0; k < s.extent; ++k) {
          const std::size_t idx = base + k * s.inner;
          g[idx] = self.grad[idx] - std::exp(y[idx]) * total;
        }
      }
    }
    self.inputs[0]->accumulate(g);
  });
}

namespace {

struct Reduction {
  Shape out_shape;
  // For every input element, the flat index of the output it reduces into.
  std::vector<std::size_t> target;
  std::size_t count = 1;
};

Reduction plan_reduction(const Shape& shape, std::vector<std::size_t> axes, const char* op) {
  Reduction r;
  std::vector<bool> reduced(shape.size(), axes.empty());
  for (auto a : axes) {
    if (a >= shape.size()) {
      throw ShapeError(std::string(op) + ": axis " + std::to_string(a) +
                       " out of range for shape " + shape_str(shape));
    }
    reduced[a] = true;
  }
  std::vector<std::size_t> out_stride(shape.size(), 0);
  std::size_t stride = 1;
  for (std::size_t d = shape.size(); d-- > 0;) {
    if (reduced[d]) {
      r.count *= shape[d];
    } else {
      out_stride[d] = stride;
      stride *= shape[d];
    }
  }
  for (std::size_t d = 0; d < shape.size(); ++d)
    if (!reduced[d]) r.out_shape.push_back(shape[d]);

  const std::size_t n = shape_numel(shape);
  r.target.resize(n);
  std::vector<std::size_t> idx(shape.size(), 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t t = 0;
    for (std::size_t d = 0; d < shape.size(); ++d) t += idx[d] * out_stride[d];
    r.target[flat] = t;
    for (std::size_t d = shape.size(); d-- > 0;) {
      if (++idx[d] < shape[d]) break;
      idx[d] = 0;
    }
  }
  return r;
}

template <typename T>
Tensor<T> reduce(const Tensor<T>& x, const std::vector<std::size_t>& axes, bool average,
                 const char* op) {
  auto plan = std::make_shared<Reduction>(plan_reduction(x.shape(), axes, op));
  std::vector<T> out(shape_numel(plan->out_shape), T(0));
  const auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) out[plan->target[i]] += in[i];
  const T scale = average ? T(1) / static_cast<T>(plan->count) : T(1);
  if (average)
    for (auto& v : out) v *= scale;
  Shape out_shape = plan->out_shape;
  return make_result<T>(op, std::move(out_shape), std::move(out), {x.node()},
                        [plan, scale](Node<T>& self) {
                          std::vector<T> g(plan->target.size());
                          for (std::size_t i = 0; i < g.size(); ++i)
                            g[i] = self.grad[plan->target[i]] * scale;
                          self.inputs[0]->accumulate(g);
                        });
}

}  // namespace

template <typename T>
Tensor<T> sum(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  return reduce(x, axes, false, "sum");
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  return reduce(x, axes, true, "mean");
}

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift,
                       BatchNormStats<T>& stats, BatchNormOptions options) {
  require_rank(x, 4, "batch_norm2d", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  for (const Tensor<T>* p : std::initializer_list<const Tensor<T>*>{
           &scale, &shift, &stats.running_mean, &stats.running_var}) {
    if (p->rank() != 1 || p->dim(0) != c) {
      throw ShapeError("batch_norm2d: per-channel parameter " + shape_str(p->shape()) +
                       " does not match " + std::to_string(c) + " channels");
    }
  }
  const std::size_t m = n * hw;
  const auto in = x.data();
  const auto gamma = scale.data();
  const auto beta = shift.data();
  const T eps = static_cast<T>(options.eps);

  std::vector<T> mu(c), inv_std(c);
  if (options.training) {
    if (m < 2) throw ShapeError("batch_norm2d: training mode needs more than one value per channel");
    for (std::size_t ch = 0; ch < c; ++ch) {
      T acc = 0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t k = 0; k < hw; ++k) acc += in[(b * c + ch) * hw + k];
      mu[ch] = acc / static_cast<T>(m);
      T var = 0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t k = 0; k < hw; ++k) {
          const T d = in[(b * c + ch) * hw + k] - mu[ch];
          var += d * d;
        }
      var /= static_cast<T>(m);
      inv_std[ch] = T(1) / std::sqrt(var + eps);
      if (options.update_stats) {
        const T mom = static_cast<T>(options.momentum);
        auto rm = stats.running_mean.mutable_data();
        auto rv = stats.running_var.mutable_data();
        const T unbiased = var * static_cast<T>(m) / static_cast<T>(m - 1);
        rm[ch] = mom * rm[ch] + (T(1) - mom) * mu[ch];
        rv[ch] = mom * rv[ch] + (T(1) - mom) * unbiased;
      }
    }
  } else {
    const auto rm = stats.running_mean.data();
    const auto rv = stats.running_var.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = rm[ch];
      inv_std[ch] = T(1) / std::sqrt(rv[ch] + eps);
    }
  }

  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  std::vector<T> out(x.numel());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t k = 0; k < hw; ++k) {
        const std::size_t i = (b * c + ch) * hw + k;
        (*xhat)[i] = (in[i] - mu[ch]) * inv_std[ch];
        out[i] = gamma[ch] * (*xhat)[i] + beta[ch];
      }

  const bool training = options.training;
  return make_result<T>(
      "batch_norm2d", x.shape(), std::move(out), {x.node(), scale.node(), shift.node()},
      [n, c, hw, m, training, xhat, inv_std](Node<T>& self) {
        Node<T>& in_node = *self.inputs[0];
        Node<T>& gamma_node = *self.inputs[1];
        Node<T>& beta_node = *self.inputs[2];
        const auto& dy = self.grad;
        std::vector<T> dgamma(c, T(0)), dbeta(c, T(0));
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t k = 0; k < hw; ++k) {
              const std::size_t i = (b * c + ch) * hw + k;
              dgamma[ch] += dy[i] * (*xhat)[i];
              dbeta[ch] += dy[i];
            }
        if (in_node.requires_grad) {
          std::vector<T> dx(n * c * hw);
          const T inv_m = T(1) / static_cast<T>(m);
          for (std::size_t ch = 0; ch < c; ++ch) {
            const T g = gamma_node.data[ch] * inv_std[ch];
            for (std::size_t b = 0; b < n; ++b)
              for (std::size_t k = 0; k < hw; ++k) {
                const std::size_t i = (b * c + ch) * hw + k;
                dx[i] = training ? g * (dy[i] - inv_m * dbeta[ch] - (*xhat)[i] * inv_m * dgamma[ch])
                                 : g * dy[i];
              }
          }
          in_node.accumulate(dx);
        }
        if (gamma_node.requires_grad) gamma_node.accumulate(dgamma);
        if (beta_node.requires_grad) beta_node.accumulate(dbeta);
      });
}

#define EKD_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> scalar_mul(const Tensor<T>&, T);                                           \
  template Tensor<T> relu(const Tensor<T>&);                                                    \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> bias_add(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, Conv2dOptions);                 \
  template Tensor<T> max_pool2d(const Tensor<T>&, std::size_t, std::size_t);                    \
  template Tensor<T> global_avg_pool2d(const Tensor<T>&);                                       \
  template Tensor<T> flatten(const Tensor<T>&);                                                 \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                          \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                    \
  template Tensor<T> log_softmax(const Tensor<T>&, std::size_t);                                \
  template Tensor<T> sum(const Tensor<T>&, const std::vector<std::size_t>&);                    \
  template Tensor<T> mean(const Tensor<T>&, const std::vector<std::size_t>&);                   \
  template Tensor<T> batch_norm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                  BatchNormStats<T>&, BatchNormOptions);

EKD_INSTANTIATE_OPS(float)
EKD_INSTANTIATE_OPS(double)

#undef EKD_INSTANTIATE_OPS

}  // namespace ekd::ad
