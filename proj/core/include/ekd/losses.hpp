#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "ekd/nn.hpp"
#include "ekd/tensor.hpp"

namespace ekd::loss {

using ad::Tensor;
using nn::BlockOutputs;

enum class StreamRole { teacher, student };
std::string to_string(StreamRole role);

/// Which classifiers supervise each guided head inside one stream.
enum class WithinStreamMode {
  simplified,     // the backbone classifier only
  full_pairwise,  // the backbone and every deeper guided head
};

struct DistillOptions {
  double temperature = 4.0;
  // Multiply KL terms by T^2 so gradient scale does not shrink with T.
  bool t2_scaling = true;
  WithinStreamMode within_mode = WithinStreamMode::simplified;
};

/// Multipliers applied when forming the total; components are reported unweighted.
struct LossWeights {
  double distill = 1.0;         // L_D
  double feature = 1.0;         // L_F
  double guided_kl = 1.0;       // L_G1
  double guided_feature = 1.0;  // L_G2
  double classification = 1.0;  // L_L
};

/// T^2 * mean over rows of KL(softmax(teacher / T) || softmax(student / T)).
/// The teacher side is detached; gradients reach only `student_logits`.
template <typename T>
Tensor<T> kl_distill(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits,
                     double temperature, bool t2_scaling = true);

/// Mean over rows of the squared Euclidean distance; `target` is detached.
template <typename T>
Tensor<T> l2_feature(const Tensor<T>& learner, const Tensor<T>& target);

template <typename T>
struct WithinStreamLoss {
  Tensor<T> l_d;
  Tensor<T> l_f;
};

/// Guided heads learn from the same stream's backbone (and, in full-pairwise
/// mode, from deeper heads). Requires at least one guided head.
template <typename T>
WithinStreamLoss<T> within_stream_loss(const BlockOutputs<T>& outs, const DistillOptions& options);

template <typename T>
struct CrossStreamLoss {
  Tensor<T> l_g1;  // backbone KL + per-pair guided KL
  Tensor<T> l_g2;  // per-pair guided feature distance
  Tensor<T> l_g;   // l_g1 + l_g2
};

/// Student outputs learn from the corresponding (detached) teacher outputs.
template <typename T>
CrossStreamLoss<T> cross_stream_loss(const BlockOutputs<T>& teacher_outs,
                                     const BlockOutputs<T>& student_outs,
                                     const DistillOptions& options);

/// Sum over every classifier in `outs` of the batch-mean cross-entropy.
template <typename T>
Tensor<T> classification_loss(const BlockOutputs<T>& outs, std::span<const std::int32_t> labels);

/// Batch-mean cross-entropy of one logits tensor.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels);

/// Plain-number view of a report, for logs and comparisons.
struct LossValues {
  StreamRole role = StreamRole::student;
  double l_d = 0, l_f = 0, l_g1 = 0, l_g2 = 0, l_g = 0, l_l = 0, total = 0;

  bool operator==(const LossValues&) const = default;
};

template <typename T>
struct LossReport {
  StreamRole role = StreamRole::student;
  Tensor<T> l_d, l_f, l_g1, l_g2, l_g, l_l, total;

  LossValues values() const;
};

/// Combines the components into one stream's objective.
///
/// Only the student receives the cross-stream term; passing `cross` for the
/// teacher is a contract error. A student without a teacher passes nullopt
/// and its guided components are reported as zero.
template <typename T>
LossReport<T> total_stream_loss(const WithinStreamLoss<T>& within,
                                const std::optional<CrossStreamLoss<T>>& cross,
                                const Tensor<T>& classification, StreamRole role,
                                const LossWeights& weights = {});

}  // namespace ekd::loss
