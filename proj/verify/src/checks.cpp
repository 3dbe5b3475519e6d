#include "ekd/verify/checks.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

#include "ekd/checkpoint.hpp"
#include "ekd/grad_check.hpp"
#include "ekd/ops.hpp"
#include "ekd/presets.hpp"
#include "ekd/verify/oracles.hpp"

namespace ekd::verify {

using ad::Tensor;
using Td = Tensor<double>;

bool Report::passed() const {
  for (const auto& r : results)
    if (!r.passed) return false;
  return !results.empty();
}

std::string Report::render() const {
  std::string out;
  for (const auto& r : results) {
    char buf[64];
    std::snprintf(buf, sizeof buf, " [%.2fs]", r.seconds);
    out += (r.passed ? "PASS " : "FAIL ") + r.name;
    if (!r.detail.empty()) out += " (" + r.detail + ")";
    out += buf;
    out += '\n';
  }
  return out;
}

LossImpl LossImpl::library() {
  LossImpl impl;
  impl.kl_distill = [](const Td& s, const Td& t, double temp, bool t2) {
    return loss::kl_distill(s, t, temp, t2);
  };
  impl.l2_feature = [](const Td& a, const Td& b) { return loss::l2_feature(a, b); };
  impl.cross_entropy = [](const Td& x, std::span<const std::int32_t> y) {
    return loss::cross_entropy(x, y);
  };
  impl.within_stream = [](const nn::BlockOutputs<double>& o, const loss::DistillOptions& opt) {
    return loss::within_stream_loss(o, opt);
  };
  impl.cross_stream = [](const nn::BlockOutputs<double>& t, const nn::BlockOutputs<double>& s,
                         const loss::DistillOptions& opt) {
    return loss::cross_stream_loss(t, s, opt);
  };
  impl.classification = [](const nn::BlockOutputs<double>& o, std::span<const std::int32_t> y) {
    return loss::classification_loss(o, y);
  };
  return impl;
}

namespace {

using Clock = std::chrono::steady_clock;

template <typename F>
CheckResult timed(const std::string& name, F&& body) {
  const auto t0 = Clock::now();
  CheckResult r;
  r.name = name;
  try {
    body(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return r;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Td random_tensor(std::mt19937_64& rng, ad::Shape shape, double scale = 1.0, bool rg = true) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(ad::shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Td::from(std::move(shape), std::move(v), rg);
}

// Contracts an op output with fixed random weights so every element matters.
Td contract(const Td& y, const Td& w) { return ad::sum(ad::mul(y, w)); }

CheckResult grad_result(const std::string& name, const ad::GradCheckReport& rep, double tol) {
  CheckResult r;
  r.name = name;
  r.passed = rep.passed && rep.max_relative_error < tol && rep.checked > 0;
  r.detail = rep.summary();
  return r;
}

Matrix to_matrix(const Td& t) {
  return {t.dim(0), t.dim(1), std::vector<double>(t.data().begin(), t.data().end())};
}

StreamValues to_values(const nn::BlockOutputs<double>& o) {
  StreamValues v{to_matrix(o.backbone_logits), to_matrix(o.backbone_feature), {}, {}};
  for (const auto& g : o.guided_logits) v.guided_logits.push_back(to_matrix(g));
  for (const auto& g : o.guided_features) v.guided_features.push_back(to_matrix(g));
  return v;
}

nn::BlockOutputs<double> random_outputs(std::mt19937_64& rng, std::size_t n, std::size_t m,
                                        std::size_t d, std::size_t heads, double logit_scale) {
  nn::BlockOutputs<double> o;
  o.backbone_logits = random_tensor(rng, {n, m}, logit_scale);
  o.backbone_feature = random_tensor(rng, {n, d});
  for (std::size_t b = 0; b < heads; ++b) {
    o.guided_blocks.push_back(b + 1);
    o.guided_logits.push_back(random_tensor(rng, {n, m}, logit_scale));
    o.guided_features.push_back(random_tensor(rng, {n, d}));
  }
  return o;
}

std::vector<char> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read '" + p.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool same_tensors(const std::vector<nn::NamedTensor<float>>& a,
                  const std::vector<nn::NamedTensor<float>>& b, std::string& why) {
  if (a.size() != b.size()) {
    why = "tensor count differs";
    return false;
  }
  for (std::size_t k = 0; k < a.size(); ++k) {
    const auto x = a[k].tensor.data(), y = b[k].tensor.data();
    if (a[k].name != b[k].name || !std::equal(x.begin(), x.end(), y.begin(), y.end())) {
      why = "tensor '" + a[k].name + "' differs";
      return false;
    }
  }
  return true;
}

data::LabeledBatch toy_batch(const data::Dataset& ds, const data::Normalization& norm,
                             std::size_t count, std::uint64_t aug_seed) {
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = i;
  return data::make_batch(ds, idx, norm, data::Augmentation{}, aug_seed, 0);
}

}  // namespace

std::vector<CheckResult> check_op_gradients(double tol) {
  std::vector<CheckResult> out;
  std::mt19937_64 rng(2024);
  auto run = [&](const std::string& name, auto make) {
    out.push_back(timed("grad:" + name, [&](CheckResult& r) { r = grad_result(r.name, make(), tol); }));
  };
  using ad::grad_check;

  run("add", [&] {
    auto a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {3, 4}), w = random_tensor(rng, {3, 4}, 1, false);
    return grad_check<double>([&] { return contract(ad::add(a, b), w); }, {a, b});
  });
  run("sub", [&] {
    auto a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {3, 4}), w = random_tensor(rng, {3, 4}, 1, false);
    return grad_check<double>([&] { return contract(ad::sub(a, b), w); }, {a, b});
  });
  run("mul", [&] {
    auto a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {3, 4}), w = random_tensor(rng, {3, 4}, 1, false);
    return grad_check<double>([&] { return contract(ad::mul(a, b), w); }, {a, b});
  });
  run("scalar_mul", [&] {
    auto a = random_tensor(rng, {5}), w = random_tensor(rng, {5}, 1, false);
    return grad_check<double>([&] { return contract(ad::scalar_mul(a, -1.7), w); }, {a});
  });
  run("relu", [&] {
    auto a = random_tensor(rng, {4, 6}), w = random_tensor(rng, {4, 6}, 1, false);
    return grad_check<double>([&] { return contract(ad::relu(a), w); }, {a});
  });
  run("matmul", [&] {
    auto a = random_tensor(rng, {3, 5}), b = random_tensor(rng, {5, 4}), w = random_tensor(rng, {3, 4}, 1, false);
    return grad_check<double>([&] { return contract(ad::matmul(a, b), w); }, {a, b});
  });
  run("bias_add", [&] {
    auto x = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4}), w = random_tensor(rng, {3, 4}, 1, false);
    return grad_check<double>([&] { return contract(ad::bias_add(x, b), w); }, {x, b});
  });
  run("conv2d", [&] {
    auto x = random_tensor(rng, {2, 3, 5, 5}), k = random_tensor(rng, {4, 3, 3, 3});
    auto w = random_tensor(rng, {2, 4, 5, 5}, 1, false);
    return grad_check<double>([&] { return contract(ad::conv2d(x, k, {1, 1}), w); }, {x, k});
  });
  run("conv2d_stride2", [&] {
    auto x = random_tensor(rng, {2, 2, 6, 6}), k = random_tensor(rng, {3, 2, 3, 3});
    auto w = random_tensor(rng, {2, 3, 3, 3}, 1, false);
    return grad_check<double>([&] { return contract(ad::conv2d(x, k, {2, 1}), w); }, {x, k});
  });
  run("max_pool2d", [&] {
    auto x = random_tensor(rng, {2, 2, 4, 4}), w = random_tensor(rng, {2, 2, 2, 2}, 1, false);
    return grad_check<double>([&] { return contract(ad::max_pool2d(x, 2, 2), w); }, {x});
  });
  run("global_avg_pool2d", [&] {
    auto x = random_tensor(rng, {2, 3, 4, 4}), w = random_tensor(rng, {2, 3}, 1, false);
    return grad_check<double>([&] { return contract(ad::global_avg_pool2d(x), w); }, {x});
  });
  run("flatten", [&] {
    auto x = random_tensor(rng, {2, 3, 2, 2}), w = random_tensor(rng, {2, 12}, 1, false);
    return grad_check<double>([&] { return contract(ad::flatten(x), w); }, {x});
  });
  run("reshape", [&] {
    auto x = random_tensor(rng, {2, 6}), w = random_tensor(rng, {3, 4}, 1, false);
    return grad_check<double>([&] { return contract(ad::reshape(x, {3, 4}), w); }, {x});
  });
  run("softmax", [&] {
    auto x = random_tensor(rng, {3, 5}, 2.0), w = random_tensor(rng, {3, 5}, 1, false);
    return grad_check<double>([&] { return contract(ad::softmax(x, 1), w); }, {x});
  });
  run("log_softmax", [&] {
    auto x = random_tensor(rng, {3, 5}, 2.0), w = random_tensor(rng, {3, 5}, 1, false);
    return grad_check<double>([&] { return contract(ad::log_softmax(x, 0), w); }, {x});
  });
  run("sum", [&] {
    auto x = random_tensor(rng, {2, 3, 4}), w = random_tensor(rng, {3}, 1, false);
    return grad_check<double>([&] { return contract(ad::sum(x, {0, 2}), w); }, {x});
  });
  run("mean", [&] {
    auto x = random_tensor(rng, {2, 3, 4}), w = random_tensor(rng, {2, 4}, 1, false);
    return grad_check<double>([&] { return contract(ad::mean(x, {1}), w); }, {x});
  });
  run("batch_norm2d", [&] {
    auto x = random_tensor(rng, {4, 3, 3, 3}), g = random_tensor(rng, {3}), b = random_tensor(rng, {3});
    auto w = random_tensor(rng, {4, 3, 3, 3}, 1, false);
    ad::BatchNormStats<double> stats{Td::zeros({3}), Td::full({3}, 1.0)};
    ad::BatchNormOptions opts;
    opts.update_stats = false;
    return grad_check<double>([&] { return contract(ad::batch_norm2d(x, g, b, stats, opts), w); },
                              {x, g, b});
  });
  run("kl_distill", [&] {
    auto s = random_tensor(rng, {4, 6}, 2.0), t = random_tensor(rng, {4, 6}, 2.0, false);
    return grad_check<double>([&] { return loss::kl_distill(s, t, 4.0, true); }, {s});
  });
  run("l2_feature", [&] {
    auto a = random_tensor(rng, {4, 6}), b = random_tensor(rng, {4, 6}, 1, false);
    return grad_check<double>([&] { return loss::l2_feature(a, b); }, {a});
  });
  run("cross_entropy", [&] {
    auto x = random_tensor(rng, {4, 5}, 2.0);
    std::vector<std::int32_t> y{0, 3, 4, 1};
    return grad_check<double>([&] { return loss::cross_entropy(x, y); }, {x});
  });
  return out;
}

CheckResult check_student_total_gradient(double tol) {
  return timed("grad:student_total_loss", [&](CheckResult& r) {
    const auto t_spec = nn::tiny_teacher_spec(8, 3);
    const auto s_spec = nn::tiny_student_spec(8, 3);
    auto teacher = nn::Stream<double>::build(nn::full_stream_spec(t_spec), 17);
    auto student = nn::Stream<double>::build(nn::full_stream_spec(s_spec), 23);
    std::mt19937_64 rng(99);
    const Td x = random_tensor(rng, {4, 3, 8, 8}, 1.0, false);
    const std::vector<std::int32_t> y{0, 2, 1, 2};
    nn::BlockOutputs<double> targets;
    {
      ad::NoGradScope ng;
      targets = teacher.forward_collect(x, nn::ForwardMode::train_frozen_stats());
    }
    // Stop-gradient operands are constants to the analytic gradient, so the
    // finite differences must hold them fixed too: the within-stream targets
    // (this stream's own backbone outputs) are frozen at the unperturbed point.
    nn::BlockOutputs<double> base;
    {
      ad::NoGradScope ng;
      base = student.forward_collect(x, nn::ForwardMode::train_frozen_stats());
    }
    loss::DistillOptions opts;
    auto objective = [&] {
      auto outs = student.forward_collect(x, nn::ForwardMode::train_frozen_stats());
      auto supervised = outs;
      supervised.backbone_logits = base.backbone_logits;
      supervised.backbone_feature = base.backbone_feature;
      auto within = loss::within_stream_loss(supervised, opts);
      auto cross = loss::cross_stream_loss(targets, outs, opts);
      auto cls = loss::classification_loss(outs, y);
      return loss::total_stream_loss<double>(within, cross, cls, loss::StreamRole::student).total;
    };
    std::vector<Td> params;
    for (const auto& p : nn::trainable(student.named_tensors())) params.push_back(p.tensor);
    ad::GradCheckOptions gopts;
    gopts.tolerance = tol;
    const auto rep = ad::grad_check<double>(objective, params, gopts);
    r = grad_result(r.name, rep, tol);
  });
}

std::vector<CheckResult> check_loss_oracles(const LossImpl& impl, std::size_t instances,
                                            double tol, std::uint64_t seed) {
  struct Acc {
    std::string name;
    double worst = 0;
  };
  std::vector<Acc> acc{{"oracle:kl_distill"}, {"oracle:l2_feature"}, {"oracle:cross_entropy"},
                       {"oracle:L_D"},        {"oracle:L_D_full_pairwise"},
                       {"oracle:L_F"},        {"oracle:L_F_full_pairwise"},
                       {"oracle:L_G1"},       {"oracle:L_G2"},
                       {"oracle:L_L"}};
  const auto t0 = Clock::now();
  std::string error;
  std::mt19937_64 rng(seed);
  try {
    for (std::size_t k = 0; k < instances; ++k) {
      const std::size_t n = 1 + rng() % 8, m = 2 + rng() % 9, d = 1 + rng() % 8, heads = 2;  // C = 3
      const double temp = std::uniform_real_distribution<double>(0.5, 8.0)(rng);
      const bool t2 = rng() % 2 == 0;
      const double scale = std::uniform_real_distribution<double>(0.5, 6.0)(rng);
      auto tch = random_outputs(rng, n, m, d, heads, scale);
      auto stu = random_outputs(rng, n, m, d, heads, scale);
      std::vector<std::int32_t> y(n);
      for (auto& v : y) v = static_cast<std::int32_t>(rng() % m);
      const auto tv = to_values(tch), sv = to_values(stu);
      auto diff = [](Acc& a, double got, double want) {
        a.worst = std::fmax(a.worst, std::isfinite(got) ? std::fabs(got - want) : INFINITY);
      };
      diff(acc[0], impl.kl_distill(stu.backbone_logits, tch.backbone_logits, temp, t2).item(),
           oracle_kl(sv.backbone_logits, tv.backbone_logits, temp, t2));
      diff(acc[1], impl.l2_feature(stu.backbone_feature, tch.backbone_feature).item(),
           oracle_l2(sv.backbone_feature, tv.backbone_feature));
      diff(acc[2], impl.cross_entropy(stu.backbone_logits, y).item(),
           oracle_cross_entropy(sv.backbone_logits, y));
      loss::DistillOptions simple{temp, t2, loss::WithinStreamMode::simplified};
      loss::DistillOptions pairwise{temp, t2, loss::WithinStreamMode::full_pairwise};
      const auto w1 = impl.within_stream(stu, simple);
      const auto w2 = impl.within_stream(stu, pairwise);
      diff(acc[3], w1.l_d.item(), oracle_l_d(sv, temp, t2, false));
      diff(acc[4], w2.l_d.item(), oracle_l_d(sv, temp, t2, true));
      diff(acc[5], w1.l_f.item(), oracle_l_f(sv, false));
      diff(acc[6], w2.l_f.item(), oracle_l_f(sv, true));
      const auto cross = impl.cross_stream(tch, stu, simple);
      diff(acc[7], cross.l_g1.item(), oracle_l_g1(tv, sv, temp, t2));
      diff(acc[8], cross.l_g2.item(), oracle_l_g2(tv, sv));
      diff(acc[9], impl.classification(stu, y).item(), oracle_l_l(sv, y));
    }
  } catch (const std::exception& e) {
    error = e.what();
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  std::vector<CheckResult> out;
  for (const auto& a : acc) {
    CheckResult r;
    r.name = a.name;
    r.seconds = secs / static_cast<double>(acc.size());
    if (!error.empty()) {
      r.detail = "exception: " + error;
    } else {
      r.passed = a.worst < tol;
      r.detail = "max |diff| " + fmt("%.3g", a.worst) + " over " + std::to_string(instances) +
                 " instances";
    }
    out.push_back(r);
  }
  return out;
}

CheckResult check_kl_spot_value(const LossImpl& impl, double tol) {
  return timed("kl_distill:spot_value", [&](CheckResult& r) {
    const Td teacher = Td::from({1, 2}, {2.0, 0.0});
    const Td student = Td::from({1, 2}, {0.0, 2.0});
    const double got = impl.kl_distill(student, teacher, 1.0, true).item();
    const double want = 2.0 * std::tanh(1.0);
    r.passed = std::fabs(got - want) < tol;
    r.detail = "got " + fmt("%.10f", got) + ", expected " + fmt("%.10f", want);
  });
}

CheckResult check_indicator() {
  return timed("loss:indicator", [&](CheckResult& r) {
    auto d = presets::desk_data(2, 1);
    auto config = presets::desk_train_config(1);
    config.loss_weights = {};  // totals below are the plain sums
    auto state = train::TrainState::create(nn::toy_teacher_spec(), nn::toy_student_spec(), config);
    const auto batch = toy_batch(d.train, d.norm, 8, 1);
    const auto res = train::train_step(state, config, batch, batch);
    const auto& t = *res.teacher;
    const auto& s = res.student;
    auto f = [](double v) { return static_cast<float>(v); };
    const bool teacher_ok = t.l_g1 == 0 && t.l_g2 == 0 && t.l_g == 0 &&
                            f(t.total) == (f(t.l_d) + f(t.l_f)) + f(t.l_l);
    const bool student_ok = s.l_g > 0 && f(s.l_g) == f(s.l_g1) + f(s.l_g2) &&
                            f(s.total) == ((f(s.l_d) + f(s.l_f)) + f(s.l_l)) + (f(s.l_g1) + f(s.l_g2));
    bool rejected = false;
    try {
      const auto one = Td::scalar(1.0);
      loss::total_stream_loss<double>({one, one}, loss::CrossStreamLoss<double>{one, one, one}, one,
                                      loss::StreamRole::teacher);
    } catch (const ad::ContractError&) {
      rejected = true;
    }
    r.passed = teacher_ok && student_ok && rejected;
    r.detail = "teacher L_G " + fmt("%g", t.l_g) + ", student L_G " + fmt("%.4g", s.l_g) +
               (rejected ? "" : ", teacher cross term accepted");
  });
}

CheckResult check_detach() {
  return timed("detach:teacher_gradients", [&](CheckResult& r) {
    auto d = presets::desk_data(2, 1);
    auto config = presets::desk_train_config(1);
    auto state = train::TrainState::create(nn::toy_teacher_spec(), nn::toy_student_spec(), config);
    const auto batch = toy_batch(d.train, d.norm, 8, 1);
    // Teacher outputs recorded on the tape, so only the loss-side detach can stop gradient.
    auto t_outs = state.teacher->forward_collect(batch.images, nn::ForwardMode::train());
    auto s_outs = state.student.forward_collect(batch.images, nn::ForwardMode::train());
    const auto opts = config.distill_options();
    auto report = loss::total_stream_loss<float>(
        loss::within_stream_loss(s_outs, opts), loss::cross_stream_loss(t_outs, s_outs, opts),
        loss::classification_loss(s_outs, batch.labels), loss::StreamRole::student);
    ad::backward(report.total);
    train::sgd_step(nn::trainable(state.student.named_tensors()), state.student_opt);
    std::size_t touched = 0, total = 0;
    for (const auto& p : state.teacher->named_tensors()) {
      ++total;
      if (!p.tensor.has_grad()) continue;
      for (float g : p.tensor.grad())
        if (g != 0.0f) {
          ++touched;
          break;
        }
    }
    // Same contract through the trainer: the step leaves no teacher gradient behind.
    const auto res = train::train_step(state, config, batch, batch);
    std::size_t leftover = 0;
    for (const auto& p : state.teacher->named_tensors()) leftover += p.tensor.has_grad();
    r.passed = touched == 0 && leftover == 0 && res.teacher.has_value();
    r.detail = std::to_string(touched) + " of " + std::to_string(total) +
               " teacher tensors received gradient; " + std::to_string(leftover) +
               " retained after train_step";
  });
}

CheckResult check_lr_schedule() {
  return timed("lr_schedule", [&](CheckResult& r) {
    const train::TrainConfig c;
    const std::pair<std::size_t, double> want[] = {{0, 0.1},  {74, 0.1},    {75, 0.01},
                                                   {130, 0.001}, {180, 0.0001}};
    r.passed = true;
    for (const auto& [epoch, lr] : want) {
      const double got = c.lr_at(epoch);
      if (got != lr) {
        r.passed = false;
        r.detail += "epoch " + std::to_string(epoch) + " -> " + fmt("%.17g", got) + "; ";
      }
    }
    double prev = c.lr_at(0);
    for (std::size_t e = 1; e < 250; ++e) {
      if (c.lr_at(e) > prev) r.passed = false;
      prev = c.lr_at(e);
    }
    if (r.passed) r.detail = "0.1 / 0.01 / 0.001 / 0.0001 at epochs 0 / 75 / 130 / 180";
  });
}

CheckResult check_zero_weight_equivalence(std::size_t steps) {
  return timed("zero_weights:ce_equivalence", [&](CheckResult& r) {
    auto d = presets::desk_data(4, 1);
    auto config = presets::desk_train_config(1);
    config.loss_weights = {0, 0, 0, 0, 1};
    auto ekd = train::TrainState::create(nn::toy_teacher_spec(), nn::toy_student_spec(), config);
    auto ref = train::TrainState::create(nn::toy_teacher_spec(), nn::toy_student_spec(), config);
    auto ce_step = [](nn::Stream<float>& s, train::SgdState<float>& opt, const data::LabeledBatch& b) {
      auto outs = s.forward_collect(b.images, nn::ForwardMode::train());
      ad::backward(loss::classification_loss(outs, b.labels));
      train::sgd_step(nn::trainable(s.named_tensors()), opt);
    };
    const auto order = data::epoch_batches(d.train.size(), 8, 3, 0);
    std::string why;
    bool same = true;
    for (std::size_t k = 0; k < steps && same; ++k) {
      const auto b = data::make_batch(d.train, order[k % order.size()], d.norm, data::Augmentation{}, 1, 0);
      train::train_step(ekd, config, b, b);
      ce_step(*ref.teacher, ref.teacher_opt, b);
      ce_step(ref.student, ref.student_opt, b);
      same = same_tensors(ekd.teacher->named_tensors(), ref.teacher->named_tensors(), why) &&
             same_tensors(ekd.student.named_tensors(), ref.student.named_tensors(), why);
      if (!same) why = "step " + std::to_string(k) + ": " + why;
    }
    r.passed = same;
    r.detail = same ? std::to_string(steps) + " steps bitwise identical" : why;
  });
}

CheckResult check_export_fidelity(std::size_t samples) {
  return timed("export:fidelity", [&](CheckResult& r) {
    auto d = presets::desk_data(4, 1);
    auto config = presets::desk_train_config(1);
    auto state = train::TrainState::create(nn::toy_teacher_spec(), nn::toy_student_spec(), config);
    const auto batch = toy_batch(d.train, d.norm, 16, 1);
    train::train_step(state, config, batch, batch);  // non-trivial running statistics

    std::mt19937_64 rng(4242);
    std::normal_distribution<float> dist(0.0f, 1.0f);
    std::vector<float> px(samples * 3 * 32 * 32);
    for (auto& v : px) v = dist(rng);
    const auto x = Tensor<float>::from({samples, 3, 32, 32}, std::move(px));

    ad::NoGradScope ng;
    const auto in_stream = state.student.forward_collect(x, nn::ForwardMode::eval()).backbone_logits;
    auto exported = state.student.export_backbone();
    const auto direct = exported.logits(x, nn::ForwardMode::eval());

    // Round trip through the checkpoint format into a freshly built backbone.
    std::vector<nn::NamedTensor<float>> named = exported.named_tensors();
    for (auto& t : named) t.name = "backbone." + t.name;
    const auto ck = io::decode_checkpoint(io::encode_checkpoint(io::make_checkpoint(named)));
    bool guided_free = true;
    for (const auto& e : ck.entries)
      if (e.name.find("guided") != std::string::npos) guided_free = false;
    auto fresh = nn::Backbone<float>::build(nn::toy_student_spec(), 999);
    auto fresh_named = fresh.named_tensors();
    for (auto& t : fresh_named) t.name = "backbone." + t.name;
    io::load_into(ck, fresh_named);
    const auto loaded = fresh.logits(x, nn::ForwardMode::eval());

    auto equal = [](const Tensor<float>& a, const Tensor<float>& b) {
      return a.shape() == b.shape() &&
             std::equal(a.data().begin(), a.data().end(), b.data().begin(), b.data().end());
    };
    r.passed = equal(in_stream, direct) && equal(in_stream, loaded) && guided_free;
    r.detail = std::to_string(samples) + " inputs; export has " + std::to_string(ck.entries.size()) +
               " tensors" + (guided_free ? "" : ", includes guided tensors");
  });
}

CheckResult check_capability_gap(const std::vector<train::EpochMetrics>& metrics) {
  CheckResult r;
  r.name = "metrics:capability_gap";
  r.passed = !metrics.empty();
  for (const auto& m : metrics) {
    if (!m.has_teacher) continue;  // no teacher, no gap
    if (m.capability_gap != m.teacher_test_acc - m.student_test_acc) {
      r.passed = false;
      r.detail = "epoch " + std::to_string(m.epoch) + " mismatch";
      return r;
    }
  }
  r.detail = std::to_string(metrics.size()) + " rows";
  return r;
}

CheckResult check_capability_gap(const std::filesystem::path& metrics_csv) {
  return timed("metrics_csv:capability_gap", [&](CheckResult& r) {
    std::ifstream in(metrics_csv);
    if (!in) throw std::runtime_error("cannot read '" + metrics_csv.string() + "'");
    std::string line;
    std::getline(in, line);
    std::vector<std::string> header;
    {
      std::stringstream ss(line);
      for (std::string c; std::getline(ss, c, ',');) header.push_back(c);
    }
    auto col = [&](const std::string& name) {
      const auto it = std::find(header.begin(), header.end(), name);
      if (it == header.end()) throw std::runtime_error("metrics.csv lacks column " + name);
      return static_cast<std::size_t>(it - header.begin());
    };
    const std::size_t ct = col("teacher_test_acc"), cs = col("student_test_acc"),
                      cg = col("capability_gap");
    std::size_t rows = 0;
    r.passed = true;
    while (std::getline(in, line)) {
      std::vector<std::string> f;
      std::stringstream ss(line);
      for (std::string c; std::getline(ss, c, ',');) f.push_back(c);
      const double t = std::strtod(f.at(ct).c_str(), nullptr);
      const double s = std::strtod(f.at(cs).c_str(), nullptr);
      const double g = std::strtod(f.at(cg).c_str(), nullptr);
      // A teacher-less run writes nan for both the teacher accuracy and the gap.
      const bool ok = std::isnan(t) ? std::isnan(g) : g == t - s;
      if (!ok) {
        r.passed = false;
        r.detail = "row " + std::to_string(rows) + ": " + f[cg] + " != " + f[ct] + " - " + f[cs];
        return;
      }
      ++rows;
    }
    r.passed = rows > 0;
    r.detail = std::to_string(rows) + " rows";
  });
}

train::RunArtifacts run_toy(const ToyRunSpec& spec, const std::filesystem::path& run_dir) {
  auto d = presets::desk_data(spec.train_per_class, spec.test_per_class, spec.resolution);
  std::size_t res = spec.resolution;
  if (spec.retain_fraction < 1.0) d.train = data::subset_few_sample(d.train, spec.retain_fraction, spec.seed);
  if (spec.downsample_to) {
    d.train = data::downsample(d.train, spec.downsample_to);
    d.test = data::downsample(d.test, spec.downsample_to);
    res = spec.downsample_to;
  }
  d.norm = data::compute_normalization(d.train);
  auto config = presets::desk_train_config(spec.epochs);
  config.seed = spec.seed;
  config.data_workers = 1;
  config.teacher_mode = spec.teacher_mode;
  auto state = train::TrainState::create(nn::toy_teacher_spec(res), nn::toy_student_spec(res), config);
  train::RunOptions opts;
  opts.run_dir = run_dir;
  return train::train(state, d.train, d.test, d.norm, data::Augmentation{}, config, opts);
}

CheckResult check_determinism(const ToyRunSpec& spec, const std::filesystem::path& work_dir) {
  return timed("determinism:toy_runs", [&](CheckResult& r) {
    const auto a = run_toy(spec, work_dir / "determinism_a");
    const auto b = run_toy(spec, work_dir / "determinism_b");
    std::vector<std::string> files{"metrics.csv", "steps.jsonl"};
    for (const auto& p : a.checkpoints) files.push_back(p.filename().string());
    r.passed = true;
    for (const auto& f : files) {
      if (slurp(work_dir / "determinism_a" / f) != slurp(work_dir / "determinism_b" / f)) {
        r.passed = false;
        r.detail += f + " differs; ";
      }
    }
    if (r.passed) r.detail = std::to_string(files.size()) + " files byte-identical";
  });
}

CheckResult check_few_sample_low_resolution(const std::filesystem::path& work_dir) {
  return timed("data:few_sample_low_resolution", [&](CheckResult& r) {
    std::vector<std::string> problems;
    const auto full = data::synth_generate(10, 200, 32, 11, presets::desk_synthetic());
    const auto sub = data::subset_few_sample(full, 0.25, 5);
    for (auto c : sub.class_counts())
      if (c != 50) problems.push_back("subset class count " + std::to_string(c) + " != 50");

    data::Dataset flat;
    flat.channels = 3;
    flat.resolution = 32;
    flat.num_classes = 2;
    flat.labels = {0, 1};
    flat.pixels.resize(2 * 3 * 32 * 32);
    for (std::size_t i = 0; i < flat.pixels.size(); ++i) flat.pixels[i] = i < 3072 ? 0.37f : 0.81f;
    const auto small = data::downsample(flat, 16);
    for (std::size_t i = 0; i < small.pixels.size(); ++i) {
      if (small.pixels[i] != (i < 3 * 16 * 16 ? 0.37f : 0.81f)) {
        problems.push_back("downsampled constant image changed");
        break;
      }
    }

    ToyRunSpec few;
    few.retain_fraction = 0.25;
    few.train_per_class = 40;
    few.epochs = 1;
    const auto a = run_toy(few, work_dir / "few_sample");
    ToyRunSpec low;
    low.downsample_to = 16;
    low.epochs = 1;
    const auto b = run_toy(low, work_dir / "low_resolution");
    if (a.metrics.size() != 1 || b.metrics.size() != 1) problems.push_back("toy run incomplete");

    r.passed = problems.empty();
    r.detail = problems.empty() ? "50/class retained of 200; 32->16 constant preserved; both modes trained"
                                : problems.front();
  });
}

Report run_suite(Level level, const std::filesystem::path& work_dir, const LossImpl& impl) {
  Report rep;
  std::filesystem::create_directories(work_dir);
  rep.add(check_op_gradients(1e-5));
  rep.add(check_student_total_gradient(1e-5));
  rep.add(check_loss_oracles(impl, 100, 1e-6));
  rep.add(check_kl_spot_value(impl, 1e-6));
  rep.add(check_indicator());
  rep.add(check_detach());
  rep.add(check_lr_schedule());
  rep.add(check_zero_weight_equivalence(5));
  rep.add(check_export_fidelity(100));
  ToyRunSpec small;
  small.train_per_class = 10;
  small.test_per_class = 5;
  small.epochs = 2;
  rep.add(check_determinism(small, work_dir / "fast"));
  if (level == Level::full) {
    ToyRunSpec bigger;
    bigger.train_per_class = 60;
    bigger.test_per_class = 20;
    bigger.epochs = 4;
    rep.add(check_determinism(bigger, work_dir / "full"));
    rep.add(check_capability_gap(work_dir / "full" / "determinism_a" / "metrics.csv"));
    rep.add(check_few_sample_low_resolution(work_dir));
  }
  return rep;
}

}  // namespace ekd::verify
