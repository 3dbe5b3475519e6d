#pragma once

// Reference implementations written as explicit loops over plain arrays.
// They share no code with the autodiff losses so the two can be compared.

#include <cstddef>
#include <cstdint>
#include <vector>

namespace ekd::verify {

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> v;  // row-major

  double operator()(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

/// Everything a stream emits for one batch, as plain numbers.
struct StreamValues {
  Matrix backbone_logits;
  Matrix backbone_feature;
  std::vector<Matrix> guided_logits;    // shallow first
  std::vector<Matrix> guided_features;
};

double oracle_kl(const Matrix& student, const Matrix& teacher, double temperature, bool t2_scaling);
double oracle_l2(const Matrix& learner, const Matrix& target);
double oracle_cross_entropy(const Matrix& logits, const std::vector<std::int32_t>& labels);

double oracle_l_d(const StreamValues& s, double temperature, bool t2_scaling, bool full_pairwise);
double oracle_l_f(const StreamValues& s, bool full_pairwise);
double oracle_l_g1(const StreamValues& teacher, const StreamValues& student, double temperature,
                   bool t2_scaling);
double oracle_l_g2(const StreamValues& teacher, const StreamValues& student);
double oracle_l_l(const StreamValues& s, const std::vector<std::int32_t>& labels);

}  // namespace ekd::verify
