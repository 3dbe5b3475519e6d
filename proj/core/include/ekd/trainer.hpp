#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ekd/data.hpp"
#include "ekd/losses.hpp"
#include "ekd/nn.hpp"
#include "ekd/optim.hpp"

namespace ekd::train {

enum class TeacherMode {
  evolutionary,  // trained online, one step ahead of the student on every batch
  fixed,         // pre-trained and frozen (classic offline distillation)
  none,          // no teacher: the student trains on its own losses only
};
std::string to_string(TeacherMode mode);
TeacherMode teacher_mode_from_string(const std::string& name);

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t data_workers = 8;
  double lr_initial = 0.1;
  std::vector<std::size_t> lr_decay_epochs{75, 130, 180};
  double lr_decay_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double temperature = 4.0;
  std::uint64_t seed = 5;
  std::size_t total_epochs = 200;

  TeacherMode teacher_mode = TeacherMode::evolutionary;
  bool guided_teacher = true;
  bool guided_student = true;
  // Guided pairs per stream; unset means C-1.
  std::optional<std::size_t> guided_pairs;
  // Within-stream distillation on/off (pretraining turns it off).
  bool within_stream = true;
  loss::WithinStreamMode within_stream_mode = loss::WithinStreamMode::simplified;
  bool t2_scaling = true;
  loss::LossWeights loss_weights;
  // Teacher augmentation seed = student augmentation seed + desync; 0 shares views.
  std::uint64_t desync = 1;
  // Overrides the seed-derived student initialization (paired ablations).
  std::optional<std::uint64_t> student_init_seed;

  /// Throws std::invalid_argument describing the first violated invariant.
  void validate() const;
  double lr_at(std::size_t epoch) const;
  loss::DistillOptions distill_options() const;
  std::uint64_t teacher_init_seed() const;
  std::uint64_t effective_student_init_seed() const;
  std::uint64_t augmentation_seed() const;
};

/// Mutable state of one run: both streams and their optimizers.
struct TrainState {
  nn::Stream<float> student;
  std::optional<nn::Stream<float>> teacher;
  SgdState<float> student_opt;
  SgdState<float> teacher_opt;
  std::size_t step = 0;  // iteration counter e

  /// Builds streams per the config. `teacher` is omitted for TeacherMode::none.
  static TrainState create(const nn::BackboneSpec& teacher_spec,
                           const nn::BackboneSpec& student_spec, const TrainConfig& config);
};

struct StepResult {
  std::optional<loss::LossValues> teacher;
  loss::LossValues student;
  std::size_t teacher_correct = 0;
  std::size_t student_correct = 0;
  std::size_t batch_size = 0;
};

/// Optional capture of the supervision targets used in a step (for tests).
struct StepTrace {
  std::optional<nn::BlockOutputs<float>> teacher_targets;
};

/// One iteration: update the teacher from its own loss, then update the
/// student against the freshly updated (detached) teacher outputs.
///
/// `teacher_view` is the same samples as `batch`, possibly augmented with a
/// different seed; the teacher trains on it. The student's targets come from
/// the updated teacher evaluated on `batch` itself. Non-finite values abort
/// with NumericError naming the stage.
StepResult train_step(TrainState& state, const TrainConfig& config, const data::LabeledBatch& batch,
                      const data::LabeledBatch& teacher_view, StepTrace* trace = nullptr);

/// Top-1 accuracy of argmax over logits rows (ties go to the lowest class).
std::size_t count_correct(const ad::Tensor<float>& logits, std::span<const std::int32_t> labels);

/// Evaluation-mode top-1 accuracy of a backbone over a dataset.
double evaluate(nn::Backbone<float>& model, const data::Dataset& dataset,
                const data::Normalization& norm, std::size_t batch_size = 256);

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0;
  double teacher_train_acc = 0;
  double student_train_acc = 0;
  double teacher_test_acc = 0;
  double student_test_acc = 0;
  double capability_gap = 0;  // teacher_test_acc - student_test_acc
  loss::LossValues teacher_loss;
  loss::LossValues student_loss;
  double seconds = 0;  // wall clock; kept out of metrics.csv
  bool has_teacher = true;
};

/// Frozen column order of metrics.csv.
const std::vector<std::string>& metrics_columns();
std::string metrics_csv_row(const EpochMetrics& m);

struct RunOptions {
  std::filesystem::path run_dir;  // empty: no files written
  bool log_steps = true;
  // Called for each checkpoint written, to emit its JSON sidecar.
  std::function<void(const std::filesystem::path& checkpoint, std::size_t epoch,
                     const std::string& kind)>
      write_sidecar;
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct RunArtifacts {
  std::vector<EpochMetrics> metrics;
  std::filesystem::path metrics_csv;
  std::filesystem::path steps_jsonl;
  std::vector<std::filesystem::path> checkpoints;
  std::filesystem::path student_export;
  double final_student_test_acc = 0;
  double final_teacher_test_acc = 0;
};

/// Runs total_epochs of train_step over `train_data`, evaluating both streams
/// on `test_data` after each epoch, then exports the student backbone.
RunArtifacts train(TrainState& state, const data::Dataset& train_data,
                   const data::Dataset& test_data, const data::Normalization& norm,
                   const data::Augmentation& augmentation, const TrainConfig& config,
                   const RunOptions& options = {});

}  // namespace ekd::train
