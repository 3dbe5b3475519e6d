#include "ekd/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <utility>

#include "ekd/checkpoint.hpp"
#include "ekd/random.hpp"

namespace ekd::train {

using ad::Tensor;
using loss::LossValues;
using nn::BlockOutputs;
using nn::ForwardMode;

std::string to_string(TeacherMode mode) {
  switch (mode) {
    case TeacherMode::evolutionary: return "evolutionary";
    case TeacherMode::fixed: return "fixed";
    case TeacherMode::none: return "none";
  }
  return "?";
}

TeacherMode teacher_mode_from_string(const std::string& name) {
  if (name == "evolutionary") return TeacherMode::evolutionary;
  if (name == "fixed") return TeacherMode::fixed;
  if (name == "none") return TeacherMode::none;
  throw std::invalid_argument("unknown teacher_mode '" + name +
                              "' (expected evolutionary, fixed or none)");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("TrainConfig: " + msg); };
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(temperature > 0) || !std::isfinite(temperature)) fail("temperature must be > 0");
  for (std::size_t i = 1; i < lr_decay_epochs.size(); ++i) {
    if (lr_decay_epochs[i] <= lr_decay_epochs[i - 1]) {
      fail("lr_decay_epochs must be strictly increasing");
    }
  }
  if (!(lr_initial > 0) || !std::isfinite(lr_initial)) fail("lr_initial must be > 0");
  if (!(lr_decay_factor > 0) || lr_decay_factor > 1) fail("lr_decay_factor must be in (0, 1]");
  if (momentum < 0 || momentum >= 1) fail("momentum must be in [0, 1)");
  if (weight_decay < 0) fail("weight_decay must be >= 0");
  if (total_epochs < 1) fail("total_epochs must be >= 1");
  const auto& w = loss_weights;
  for (double v : {w.distill, w.feature, w.guided_kl, w.guided_feature, w.classification}) {
    if (v < 0 || !std::isfinite(v)) fail("loss weights must be finite and >= 0");
  }
}

double TrainConfig::lr_at(std::size_t epoch) const {
  return train::lr_at(epoch, lr_initial, lr_decay_epochs, lr_decay_factor);
}

loss::DistillOptions TrainConfig::distill_options() const {
  return {temperature, t2_scaling, within_stream_mode};
}

std::uint64_t TrainConfig::teacher_init_seed() const { return derive_seed(seed, "teacher-init"); }

std::uint64_t TrainConfig::effective_student_init_seed() const {
  return student_init_seed.value_or(derive_seed(seed, "student-init"));
}

std::uint64_t TrainConfig::augmentation_seed() const { return derive_seed(seed, "aug"); }

namespace {

nn::StreamSpec stream_spec(const nn::BackboneSpec& backbone, bool guided,
                           const std::optional<std::size_t>& pairs) {
  nn::StreamSpec s;
  s.backbone = backbone;
  const std::size_t max_pairs = backbone.blocks.empty() ? 0 : backbone.blocks.size() - 1;
  if (guided) {
    s.guided_pairs = pairs.value_or(max_pairs);
    if (s.guided_pairs > max_pairs) {
      throw std::invalid_argument("guided_pairs " + std::to_string(s.guided_pairs) +
                                  " exceeds C-1 = " + std::to_string(max_pairs));
    }
  }
  return s;
}

Tensor<float> zero_scalar() { return Tensor<float>::scalar(0.0f); }

// Rethrows a numeric failure with the stage that produced it.
template <typename F>
auto guarded(const std::string& stage, F&& f) {
  try {
    return f();
  } catch (const ad::NumericError& e) {
    throw ad::NumericError(stage + ": " + e.what());
  }
}

void require_finite(const std::string& stage, const LossValues& v) {
  const std::pair<const char*, double> parts[] = {{"l_d", v.l_d},   {"l_f", v.l_f},
                                                  {"l_g1", v.l_g1}, {"l_g2", v.l_g2},
                                                  {"l_l", v.l_l},   {"total", v.total}};
  for (const auto& [name, x] : parts) {
    if (!std::isfinite(x)) {
      throw ad::NumericError(stage + ": loss component " + name + " is not finite");
    }
  }
}

loss::LossReport<float> stream_objective(const BlockOutputs<float>& outs,
                                         const std::optional<loss::CrossStreamLoss<float>>& cross,
                                         std::span<const std::int32_t> labels,
                                         loss::StreamRole role, const TrainConfig& config) {
  loss::WithinStreamLoss<float> within{zero_scalar(), zero_scalar()};
  if (config.within_stream && outs.num_guided() > 0) {
    within = loss::within_stream_loss(outs, config.distill_options());
  }
  Tensor<float> cls = loss::classification_loss(outs, labels);
  return loss::total_stream_loss(within, cross, cls, role, config.loss_weights);
}

}  // namespace

TrainState TrainState::create(const nn::BackboneSpec& teacher_spec,
                              const nn::BackboneSpec& student_spec, const TrainConfig& config) {
  config.validate();
  TrainState s{
      nn::Stream<float>::build(
          stream_spec(student_spec, config.guided_student, config.guided_pairs),
          config.effective_student_init_seed()),
      std::nullopt, {}, {}, 0};
  s.student_opt = SgdState<float>::for_params(nn::trainable(s.student.named_tensors()),
                                              config.lr_initial, config.momentum,
                                              config.weight_decay);
  if (config.teacher_mode != TeacherMode::none) {
    s.teacher = nn::Stream<float>::build(
        stream_spec(teacher_spec, config.guided_teacher, config.guided_pairs),
        config.teacher_init_seed());
    s.teacher_opt = SgdState<float>::for_params(nn::trainable(s.teacher->named_tensors()),
                                                config.lr_initial, config.momentum,
                                                config.weight_decay);
  }
  return s;
}

std::size_t count_correct(const Tensor<float>& logits, std::span<const std::int32_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ad::ShapeError("count_correct: logits " + ad::shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), m = logits.dim(1);
  const auto d = logits.data();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = d.data() + i * m;
    // max_element returns the first maximum, i.e. the lowest tied class.
    const auto best = static_cast<std::int32_t>(std::max_element(row, row + m) - row);
    if (best == labels[i]) ++correct;
  }
  return correct;
}

StepResult train_step(TrainState& state, const TrainConfig& config, const data::LabeledBatch& batch,
                      const data::LabeledBatch& teacher_view, StepTrace* trace) {
  if (batch.size() == 0) throw std::invalid_argument("train_step: empty batch");
  if (teacher_view.size() != batch.size() || teacher_view.labels != batch.labels) {
    throw std::invalid_argument("train_step: teacher view must hold the same samples as the batch");
  }
  StepResult result;
  result.batch_size = batch.size();

  // (1) Teacher: update from its own objective, then produce fresh targets.
  std::optional<BlockOutputs<float>> targets;
  if (state.teacher) {
    auto& teacher = *state.teacher;
    if (config.teacher_mode == TeacherMode::evolutionary) {
      const auto params = nn::trainable(teacher.named_tensors());
      auto report = guarded("teacher", [&] {
        auto outs = teacher.forward_collect(teacher_view.images, ForwardMode::train());
        result.teacher_correct = count_correct(outs.backbone_logits, teacher_view.labels);
        return stream_objective(outs, std::nullopt, teacher_view.labels,
                                loss::StreamRole::teacher, config);
      });
      result.teacher = report.values();
      require_finite("teacher", *result.teacher);
      guarded("teacher backward", [&] {
        ad::backward(report.total);
        return 0;
      });
      sgd_step(params, state.teacher_opt);
      ad::NoGradScope no_grad;
      targets = guarded("teacher targets", [&] {
        return teacher.forward_collect(batch.images, ForwardMode::train_frozen_stats());
      });
    } else {
      ad::NoGradScope no_grad;
      targets = guarded("teacher targets", [&] {
        return teacher.forward_collect(batch.images, ForwardMode::eval());
      });
      result.teacher_correct = count_correct(targets->backbone_logits, batch.labels);
    }
  }
  if (trace) trace->teacher_targets = targets;

  // (2) Student: within-stream, cross-stream against the detached targets, classification.
  const auto params = nn::trainable(state.student.named_tensors());
  auto report = guarded("student", [&] {
    auto outs = state.student.forward_collect(batch.images, ForwardMode::train());
    result.student_correct = count_correct(outs.backbone_logits, batch.labels);
    std::optional<loss::CrossStreamLoss<float>> cross;
    if (targets) {
      const bool paired = targets->num_guided() > 0 && outs.num_guided() > 0;
      cross = paired ? loss::cross_stream_loss(*targets, outs, config.distill_options())
                     : loss::cross_stream_loss(targets->backbone_only(), outs.backbone_only(),
                                               config.distill_options());
    }
    return stream_objective(outs, cross, batch.labels, loss::StreamRole::student, config);
  });
  result.student = report.values();
  require_finite("student", result.student);
  guarded("student backward", [&] {
    ad::backward(report.total);
    return 0;
  });
  sgd_step(params, state.student_opt);
  ++state.step;
  return result;
}

double evaluate(nn::Backbone<float>& model, const data::Dataset& dataset,
                const data::Normalization& norm, std::size_t batch_size) {
  if (dataset.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  ad::NoGradScope no_grad;
  const data::Augmentation none{false, 0, false};
  std::size_t correct = 0;
  for (const auto& idx : data::sequential_batches(dataset.size(), std::max<std::size_t>(1, batch_size))) {
    auto b = data::make_batch(dataset, idx, norm, none, 0, 0);
    correct += count_correct(model.logits(b.images, ForwardMode::eval()), b.labels);
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols = [] {
    std::vector<std::string> c{"epoch",           "lr",
                               "teacher_train_acc", "student_train_acc",
                               "teacher_test_acc",  "student_test_acc",
                               "capability_gap"};
    for (const char* who : {"teacher", "student"}) {
      for (const char* part : {"l_d", "l_f", "l_g1", "l_g2", "l_g", "l_l", "total"}) {
        c.push_back(std::string(who) + "_" + part);
      }
    }
    return c;
  }();
  return cols;
}

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string json_num(double v) { return std::isfinite(v) ? num(v) : "null"; }

void append_values(std::string& out, const LossValues& v, bool present) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (double x : {v.l_d, v.l_f, v.l_g1, v.l_g2, v.l_g, v.l_l, v.total}) {
    out += ',';
    out += num(present ? x : nan);
  }
}

std::string json_values(const LossValues& v) {
  return "{\"l_d\":" + json_num(v.l_d) + ",\"l_f\":" + json_num(v.l_f) +
         ",\"l_g1\":" + json_num(v.l_g1) + ",\"l_g2\":" + json_num(v.l_g2) +
         ",\"l_g\":" + json_num(v.l_g) + ",\"l_l\":" + json_num(v.l_l) +
         ",\"total\":" + json_num(v.total) + "}";
}

void add_scaled(LossValues& acc, const LossValues& v, double k) {
  acc.l_d += k * v.l_d;
  acc.l_f += k * v.l_f;
  acc.l_g1 += k * v.l_g1;
  acc.l_g2 += k * v.l_g2;
  acc.l_g += k * v.l_g;
  acc.l_l += k * v.l_l;
  acc.total += k * v.total;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  return out;
}

void flush_line(std::ofstream& out, const std::filesystem::path& path, const std::string& line) {
  out << line << '\n';
  out.flush();
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

// Backbone tensors of a stream under the stream's own "backbone." names.
std::vector<nn::NamedTensor<float>> backbone_tensors(const nn::Backbone<float>& backbone) {
  auto tensors = backbone.named_tensors();
  for (auto& t : tensors) t.name = "backbone." + t.name;
  return tensors;
}

struct StepBatches {
  data::LabeledBatch student;
  std::optional<data::LabeledBatch> teacher;  // unset: the teacher shares the student's view
};

}  // namespace

std::string metrics_csv_row(const EpochMetrics& m) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const bool t = m.has_teacher;
  std::string row = std::to_string(m.epoch) + "," + num(m.lr) + "," +
                    num(t ? m.teacher_train_acc : nan) + "," + num(m.student_train_acc) + "," +
                    num(t ? m.teacher_test_acc : nan) + "," + num(m.student_test_acc) + "," +
                    num(t ? m.capability_gap : nan);
  append_values(row, m.teacher_loss, t);
  append_values(row, m.student_loss, true);
  return row;
}

RunArtifacts train(TrainState& state, const data::Dataset& train_data,
                   const data::Dataset& test_data, const data::Normalization& norm,
                   const data::Augmentation& augmentation, const TrainConfig& config,
                   const RunOptions& options) {
  config.validate();
  if (train_data.size() == 0) throw std::invalid_argument("train: empty training set");
  RunArtifacts art;
  const bool write = !options.run_dir.empty();
  std::ofstream metrics_out, steps_out, timing_out;
  const auto& dir = options.run_dir;
  if (write) {
    std::filesystem::create_directories(dir);
    art.metrics_csv = dir / "metrics.csv";
    metrics_out = open_out(art.metrics_csv);
    std::string header;
    for (const auto& c : metrics_columns()) header += (header.empty() ? "" : ",") + c;
    flush_line(metrics_out, art.metrics_csv, header);
    if (options.log_steps) {
      art.steps_jsonl = dir / "steps.jsonl";
      steps_out = open_out(art.steps_jsonl);
    }
    timing_out = open_out(dir / "timing.csv");
    flush_line(timing_out, dir / "timing.csv", "epoch,seconds");
  }

  auto save = [&](const std::filesystem::path& path, const std::vector<nn::NamedTensor<float>>& t,
                  std::size_t epoch, const std::string& kind) {
    io::write_checkpoint(path, io::make_checkpoint(t));
    if (options.write_sidecar) options.write_sidecar(path, epoch, kind);
    if (std::find(art.checkpoints.begin(), art.checkpoints.end(), path) == art.checkpoints.end()) {
      art.checkpoints.push_back(path);
    }
  };

  const bool has_teacher = state.teacher.has_value();
  const std::uint64_t shuffle_seed = derive_seed(config.seed, "shuffle");
  const std::uint64_t aug_seed = config.augmentation_seed();
  const bool separate_views = has_teacher && config.desync != 0 && augmentation.enabled;
  double best = -1;

  for (std::size_t epoch = 0; epoch < config.total_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = config.lr_at(epoch);
    state.student_opt.lr = lr;
    state.teacher_opt.lr = lr;

    const auto order = data::epoch_batches(train_data.size(), config.batch_size, shuffle_seed, epoch);
    data::OrderedPrefetcher<StepBatches> batches(
        order.size(), config.data_workers, [&](std::size_t k) {
          StepBatches sb{data::make_batch(train_data, order[k], norm, augmentation, aug_seed, epoch),
                         std::nullopt};
          if (separate_views) {
            sb.teacher = data::make_batch(train_data, order[k], norm, augmentation,
                                          aug_seed + config.desync, epoch);
          }
          return sb;
        });

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    m.has_teacher = has_teacher;
    m.teacher_loss.role = loss::StreamRole::teacher;
    std::size_t seen = 0, t_correct = 0, s_correct = 0;
    const double n = static_cast<double>(train_data.size());
    for (std::size_t k = 0; auto sb = batches.next(); ++k) {
      const auto& tv = sb->teacher ? *sb->teacher : sb->student;
      const StepResult r = train_step(state, config, sb->student, tv);
      seen += r.batch_size;
      t_correct += r.teacher_correct;
      s_correct += r.student_correct;
      const double share = static_cast<double>(r.batch_size) / n;
      if (r.teacher) add_scaled(m.teacher_loss, *r.teacher, share);
      add_scaled(m.student_loss, r.student, share);
      if (write && options.log_steps) {
        std::string line = "{\"epoch\":" + std::to_string(epoch) +
                           ",\"step\":" + std::to_string(state.step) + ",\"lr\":" + json_num(lr) +
                           ",\"batch_size\":" + std::to_string(r.batch_size);
        if (r.teacher) line += ",\"teacher\":" + json_values(*r.teacher);
        line += ",\"student\":" + json_values(r.student) + "}";
        flush_line(steps_out, art.steps_jsonl, line);
      }
    }
    m.student_train_acc = static_cast<double>(s_correct) / static_cast<double>(seen);
    m.student_test_acc = evaluate(state.student.backbone(), test_data, norm);
    if (has_teacher) {
      m.teacher_train_acc = static_cast<double>(t_correct) / static_cast<double>(seen);
      m.teacher_test_acc = evaluate(state.teacher->backbone(), test_data, norm);
      m.capability_gap = m.teacher_test_acc - m.student_test_acc;
    }
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    art.metrics.push_back(m);

    if (write) {
      flush_line(metrics_out, art.metrics_csv, metrics_csv_row(m));
      flush_line(timing_out, dir / "timing.csv", std::to_string(epoch) + "," + num(m.seconds));
      save(dir / "student_last.ekd", state.student.named_tensors(), epoch, "student_last");
      if (has_teacher) {
        save(dir / "teacher_last.ekd", state.teacher->named_tensors(), epoch, "teacher_last");
      }
      if (m.student_test_acc > best) {
        save(dir / "student_best.ekd", state.student.named_tensors(), epoch, "student_best");
      }
    }
    best = std::max(best, m.student_test_acc);
    if (options.on_epoch) options.on_epoch(m);
  }

  art.final_student_test_acc = art.metrics.back().student_test_acc;
  art.final_teacher_test_acc = has_teacher ? art.metrics.back().teacher_test_acc : 0.0;
  if (write) {
    art.student_export = dir / "student_export.ekd";
    save(art.student_export, backbone_tensors(state.student.export_backbone()),
         config.total_epochs - 1, "student_export");
  }
  return art;
}

}  // namespace ekd::train
