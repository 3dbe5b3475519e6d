#include "ekd/verify/oracles.hpp"

#include <cmath>

namespace ekd::verify {

namespace {

// Probabilities of one row at temperature t, via the shifted exponentials.
std::vector<double> row_probs(const Matrix& x, std::size_t i, double t) {
  double top = x(i, 0) / t;
  for (std::size_t j = 1; j < x.cols; ++j) top = std::fmax(top, x(i, j) / t);
  std::vector<double> e(x.cols);
  double z = 0;
  for (std::size_t j = 0; j < x.cols; ++j) {
    e[j] = std::exp(x(i, j) / t - top);
    z += e[j];
  }
  for (double& p : e) p /= z;
  return e;
}

}  // namespace

double oracle_kl(const Matrix& student, const Matrix& teacher, double temperature,
                 bool t2_scaling) {
  double total = 0;
  for (std::size_t i = 0; i < student.rows; ++i) {
    const auto p = row_probs(teacher, i, temperature);
    const auto q = row_probs(student, i, temperature);
    for (std::size_t j = 0; j < student.cols; ++j) {
      if (p[j] > 0) total += p[j] * (std::log(p[j]) - std::log(q[j]));
    }
  }
  total /= static_cast<double>(student.rows);
  return t2_scaling ? total * temperature * temperature : total;
}

double oracle_l2(const Matrix& learner, const Matrix& target) {
  double total = 0;
  for (std::size_t i = 0; i < learner.rows; ++i) {
    for (std::size_t j = 0; j < learner.cols; ++j) {
      const double d = learner(i, j) - target(i, j);
      total += d * d;
    }
  }
  return total / static_cast<double>(learner.rows);
}

double oracle_cross_entropy(const Matrix& logits, const std::vector<std::int32_t>& labels) {
  double total = 0;
  for (std::size_t i = 0; i < logits.rows; ++i) {
    const auto p = row_probs(logits, i, 1.0);
    total -= std::log(p[static_cast<std::size_t>(labels[i])]);
  }
  return total / static_cast<double>(logits.rows);
}

double oracle_l_d(const StreamValues& s, double temperature, bool t2_scaling, bool full_pairwise) {
  double total = 0;
  const std::size_t heads = s.guided_logits.size();
  for (std::size_t b = 0; b < heads; ++b) {
    total += oracle_kl(s.guided_logits[b], s.backbone_logits, temperature, t2_scaling);
    if (!full_pairwise) continue;
    for (std::size_t c = b + 1; c < heads; ++c) {
      total += oracle_kl(s.guided_logits[b], s.guided_logits[c], temperature, t2_scaling);
    }
  }
  return total;
}

double oracle_l_f(const StreamValues& s, bool full_pairwise) {
  double total = 0;
  const std::size_t heads = s.guided_features.size();
  for (std::size_t b = 0; b < heads; ++b) {
    total += oracle_l2(s.guided_features[b], s.backbone_feature);
    if (!full_pairwise) continue;
    for (std::size_t c = b + 1; c < heads; ++c) {
      total += oracle_l2(s.guided_features[b], s.guided_features[c]);
    }
  }
  return total;
}

double oracle_l_g1(const StreamValues& teacher, const StreamValues& student, double temperature,
                   bool t2_scaling) {
  double total = oracle_kl(student.backbone_logits, teacher.backbone_logits, temperature, t2_scaling);
  for (std::size_t b = 0; b < student.guided_logits.size(); ++b) {
    total += oracle_kl(student.guided_logits[b], teacher.guided_logits[b], temperature, t2_scaling);
  }
  return total;
}

double oracle_l_g2(const StreamValues& teacher, const StreamValues& student) {
  double total = 0;
  for (std::size_t b = 0; b < student.guided_features.size(); ++b) {
    total += oracle_l2(student.guided_features[b], teacher.guided_features[b]);
  }
  return total;
}

double oracle_l_l(const StreamValues& s, const std::vector<std::int32_t>& labels) {
  double total = oracle_cross_entropy(s.backbone_logits, labels);
  for (const auto& g : s.guided_logits) total += oracle_cross_entropy(g, labels);
  return total;
}

}  // namespace ekd::verify
