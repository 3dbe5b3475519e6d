#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ekd/data.hpp"
#include "ekd/nn.hpp"
#include "ekd/trainer.hpp"

namespace ekd::cli {

inline constexpr int kSchemaVersion = 1;

/// Bad flags, malformed or inconsistent configuration (exit status 2).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DataSource { synthetic, cifar_binary, idx };

struct DatasetSpec {
  DataSource source = DataSource::synthetic;
  std::size_t num_classes = 10;
  std::size_t resolution = 32;
  std::size_t channels = 3;
  // synthetic
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 50;
  std::uint64_t synth_seed = 11;
  double noise = data::SyntheticOptions{}.noise;
  double max_mix = data::SyntheticOptions{}.max_mix;
  // cifar_binary: train_path/test_path; idx: also the two label files
  std::string variant = "cifar10";
  std::string train_path, test_path, train_labels, test_labels;
  // regimes
  double retain_fraction = 1.0;
  std::uint64_t subset_seed = 5;
  std::optional<std::size_t> downsample_to;
  // unset: computed on the (subsetted, downsampled) training split
  std::optional<data::Normalization> normalization;
  data::Augmentation augmentation;

  void validate() const;
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  train::TrainConfig train;
  std::string teacher_preset = "toy_teacher";
  std::string student_preset = "toy_student";
  DatasetSpec data;
  std::filesystem::path run_dir = "runs/ekd";
  // Pretrained stream for teacher_mode = fixed.
  std::string teacher_checkpoint;
  std::string verify_level = "fast";
  bool ablation_pair_sweep = false;
  bool dump_embeddings = false;

  void validate() const;
  nn::BackboneSpec teacher_spec() const;
  nn::BackboneSpec student_spec() const;
};

/// Desk-scale defaults: toy presets, synthetic data, 30 epochs.
ExperimentConfig default_experiment();

std::string to_json(const ExperimentConfig& config);
/// Strict parse: unknown keys, wrong types and schema mismatches throw UsageError.
/// Missing keys keep their defaults.
ExperimentConfig experiment_from_json(const std::string& text);
ExperimentConfig load_experiment(const std::filesystem::path& path);

struct Datasets {
  data::Dataset train;
  data::Dataset test;
  data::Normalization norm;
};

Datasets build_datasets(const DatasetSpec& spec);

struct AblationRow {
  std::string name;
  train::TeacherMode teacher_mode;
  bool guided_teacher;
  bool guided_student;
};

/// KD, KD+ET, KD+S_G, KD+S_G+ET, KD+T_G+S_G, EKD.
const std::vector<AblationRow>& ablation_grid();

struct TrainOutcome {
  train::RunArtifacts artifacts;
  std::filesystem::path run_dir;
};

/// Single stream trained with classification loss only; writes pretrained.ekd.
TrainOutcome cmd_pretrain(const ExperimentConfig& config, std::ostream& log);
TrainOutcome cmd_train(const ExperimentConfig& config, std::ostream& log);

struct AblationResult {
  std::string row;
  train::TeacherMode teacher_mode;
  bool guided_teacher = false;
  bool guided_student = false;
  std::size_t guided_pairs = 0;
  bool ok = false;
  double student_test_acc = 0;
  double teacher_test_acc = 0;
  std::string error;
};

/// Runs every grid row (and, if enabled, the guided-pair sweep of the full
/// configuration) on identical data, seeds and initial student weights.
/// Writes ablation.csv; a failing row is recorded and the rest continue.
std::vector<AblationResult> cmd_ablate(const ExperimentConfig& config, std::ostream& log);

struct EvalResult {
  double accuracy = 0;
  std::size_t samples = 0;
};

/// Top-1 accuracy of the student preset loaded from a full-stream or exported
/// checkpoint, on the configured test split. A non-empty `embeddings` path
/// also receives the test-split features.
EvalResult cmd_eval(const ExperimentConfig& config, const std::filesystem::path& checkpoint,
                    std::ostream& out, const std::filesystem::path& embeddings = {});

/// Copies only the backbone tensors of a stream checkpoint.
void cmd_export(const std::filesystem::path& checkpoint, const std::filesystem::path& out);

/// Writes pre-classifier features: u64 count, u64 dim, then float32 values.
void write_embeddings(const std::filesystem::path& path, std::size_t count, std::size_t dim,
                      const std::vector<float>& values);

}  // namespace ekd::cli
