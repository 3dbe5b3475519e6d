#include "ekd/losses.hpp"

#include "ekd/ops.hpp"

namespace ekd::loss {

using ad::ContractError;
using ad::ShapeError;

std::string to_string(StreamRole role) {
  return role == StreamRole::teacher ? "teacher" : "student";
}

namespace {

template <typename T>
void require_matrix_pair(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.rank() != 2 || a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": expected two equal [batch, dim] tensors, got " +
                     ad::shape_str(a.shape()) + " and " + ad::shape_str(b.shape()));
  }
}

template <typename T>
Tensor<T> zero() {
  return Tensor<T>::scalar(T(0));
}

}  // namespace

template <typename T>
Tensor<T> kl_distill(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits,
                     double temperature, bool t2_scaling) {
  require_matrix_pair(student_logits, teacher_logits, "kl_distill");
  if (!(temperature > 0)) {
    throw ContractError("kl_distill: temperature must be positive, got " +
                        std::to_string(temperature));
  }
  const T inv_t = static_cast<T>(1.0 / temperature);
  const Tensor<T> target = ad::scalar_mul(teacher_logits.detach(), inv_t);
  const Tensor<T> p = ad::softmax(target, 1);
  const Tensor<T> log_p = ad::log_softmax(target, 1);
  const Tensor<T> log_q = ad::log_softmax(ad::scalar_mul(student_logits, inv_t), 1);
  const Tensor<T> kl = ad::sum(ad::mul(p, ad::sub(log_p, log_q)));
  const double scale = (t2_scaling ? temperature * temperature : 1.0) /
                       static_cast<double>(student_logits.dim(0));
  return ad::scalar_mul(kl, static_cast<T>(scale));
}

template <typename T>
Tensor<T> l2_feature(const Tensor<T>& learner, const Tensor<T>& target) {
  require_matrix_pair(learner, target, "l2_feature");
  const Tensor<T> diff = ad::sub(learner, target.detach());
  return ad::scalar_mul(ad::sum(ad::mul(diff, diff)),
                        static_cast<T>(1.0 / static_cast<double>(learner.dim(0))));
}

template <typename T>
WithinStreamLoss<T> within_stream_loss(const BlockOutputs<T>& outs, const DistillOptions& options) {
  const std::size_t heads = outs.num_guided();
  if (heads == 0) throw ContractError("within_stream_loss: stream has no guided heads");
  if (outs.guided_features.size() != heads) {
    throw ContractError("within_stream_loss: guided features and logits disagree in count");
  }
  WithinStreamLoss<T> loss{zero<T>(), zero<T>()};
  bool first = true;
  for (std::size_t b = 0; b < heads; ++b) {
    Tensor<T> d = kl_distill(outs.guided_logits[b], outs.backbone_logits, options.temperature,
                             options.t2_scaling);
    Tensor<T> f = l2_feature(outs.guided_features[b], outs.backbone_feature);
    if (options.within_mode == WithinStreamMode::full_pairwise) {
      for (std::size_t c = b + 1; c < heads; ++c) {
        d = ad::add(d, kl_distill(outs.guided_logits[b], outs.guided_logits[c],
                                  options.temperature, options.t2_scaling));
        f = ad::add(f, l2_feature(outs.guided_features[b], outs.guided_features[c]));
      }
    }
    loss.l_d = first ? d : ad::add(loss.l_d, d);
    loss.l_f = first ? f : ad::add(loss.l_f, f);
    first = false;
  }
  return loss;
}

template <typename T>
CrossStreamLoss<T> cross_stream_loss(const BlockOutputs<T>& teacher_outs,
                                     const BlockOutputs<T>& student_outs,
                                     const DistillOptions& options) {
  if (teacher_outs.num_guided() != student_outs.num_guided() ||
      teacher_outs.guided_features.size() != student_outs.guided_features.size()) {
    throw ContractError("cross_stream_loss: teacher has " +
                        std::to_string(teacher_outs.num_guided()) + " guided heads, student has " +
                        std::to_string(student_outs.num_guided()));
  }
  CrossStreamLoss<T> loss;
  loss.l_g1 = kl_distill(student_outs.backbone_logits, teacher_outs.backbone_logits,
                         options.temperature, options.t2_scaling);
  loss.l_g2 = zero<T>();
  for (std::size_t b = 0; b < student_outs.num_guided(); ++b) {
    loss.l_g1 = ad::add(loss.l_g1, kl_distill(student_outs.guided_logits[b],
                                              teacher_outs.guided_logits[b], options.temperature,
                                              options.t2_scaling));
    const Tensor<T> f = l2_feature(student_outs.guided_features[b], teacher_outs.guided_features[b]);
    loss.l_g2 = b == 0 ? f : ad::add(loss.l_g2, f);
  }
  loss.l_g = ad::add(loss.l_g1, loss.l_g2);
  return loss;
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy: logits " + ad::shape_str(logits.shape()) + " for " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), m = logits.dim(1);
  std::vector<T> onehot(n * m, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= m) {
      throw ContractError("cross_entropy: label " + std::to_string(labels[i]) +
                          " outside [0, " + std::to_string(m) + ")");
    }
    onehot[i * m + static_cast<std::size_t>(labels[i])] = T(1);
  }
  const Tensor<T> picked =
      ad::sum(ad::mul(Tensor<T>::from({n, m}, std::move(onehot)), ad::log_softmax(logits, 1)));
  return ad::scalar_mul(picked, static_cast<T>(-1.0 / static_cast<double>(n)));
}

template <typename T>
Tensor<T> classification_loss(const BlockOutputs<T>& outs, std::span<const std::int32_t> labels) {
  Tensor<T> total = cross_entropy(outs.backbone_logits, labels);
  for (const auto& logits : outs.guided_logits) total = ad::add(total, cross_entropy(logits, labels));
  return total;
}

template <typename T>
LossValues LossReport<T>::values() const {
  LossValues v;
  v.role = role;
  v.l_d = l_d.item();
  v.l_f = l_f.item();
  v.l_g1 = l_g1.item();
  v.l_g2 = l_g2.item();
  v.l_g = l_g.item();
  v.l_l = l_l.item();
  v.total = total.item();
  return v;
}

template <typename T>
LossReport<T> total_stream_loss(const WithinStreamLoss<T>& within,
                                const std::optional<CrossStreamLoss<T>>& cross,
                                const Tensor<T>& classification, StreamRole role,
                                const LossWeights& weights) {
  if (role == StreamRole::teacher && cross) {
    throw ContractError("total_stream_loss: the teacher stream does not receive cross-stream loss");
  }
  LossReport<T> r;
  r.role = role;
  r.l_d = within.l_d;
  r.l_f = within.l_f;
  r.l_l = classification;
  auto w = [](const Tensor<T>& t, double k) { return ad::scalar_mul(t, static_cast<T>(k)); };
  r.total = ad::add(ad::add(w(r.l_d, weights.distill), w(r.l_f, weights.feature)),
                    w(r.l_l, weights.classification));
  if (cross) {
    r.l_g1 = cross->l_g1;
    r.l_g2 = cross->l_g2;
    r.l_g = cross->l_g;
    r.total = ad::add(r.total, ad::add(w(r.l_g1, weights.guided_kl),
                                       w(r.l_g2, weights.guided_feature)));
  } else {
    r.l_g1 = zero<T>();
    r.l_g2 = zero<T>();
    r.l_g = zero<T>();
  }
  return r;
}

#define EKD_INSTANTIATE_LOSSES(T)                                                              \
  template Tensor<T> kl_distill(const Tensor<T>&, const Tensor<T>&, double, bool);             \
  template Tensor<T> l2_feature(const Tensor<T>&, const Tensor<T>&);                           \
  template WithinStreamLoss<T> within_stream_loss(const BlockOutputs<T>&,                      \
                                                  const DistillOptions&);                      \
  template CrossStreamLoss<T> cross_stream_loss(const BlockOutputs<T>&, const BlockOutputs<T>&, \
                                                const DistillOptions&);                        \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::int32_t>);           \
  template Tensor<T> classification_loss(const BlockOutputs<T>&,                               \
                                         std::span<const std::int32_t>);                       \
  template struct LossReport<T>;                                                               \
  template LossReport<T> total_stream_loss(const WithinStreamLoss<T>&,                         \
                                           const std::optional<CrossStreamLoss<T>>&,           \
                                           const Tensor<T>&, StreamRole, const LossWeights&);

EKD_INSTANTIATE_LOSSES(float)
EKD_INSTANTIATE_LOSSES(double)

#undef EKD_INSTANTIATE_LOSSES

}  // namespace ekd::loss
