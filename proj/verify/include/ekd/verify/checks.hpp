#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ekd/losses.hpp"
#include "ekd/trainer.hpp"

namespace ekd::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0;
};

struct Report {
  std::vector<CheckResult> results;

  bool passed() const;
  void add(CheckResult r) { results.push_back(std::move(r)); }
  void add(const std::vector<CheckResult>& rs) { results.insert(results.end(), rs.begin(), rs.end()); }
  /// One "PASS name (detail)" / "FAIL name (detail)" line per check.
  std::string render() const;
};

/// The loss functions under test. Checks call through this table so a
/// deliberately broken implementation can be swapped in.
struct LossImpl {
  using T = double;
  std::function<ad::Tensor<T>(const ad::Tensor<T>&, const ad::Tensor<T>&, double, bool)> kl_distill;
  std::function<ad::Tensor<T>(const ad::Tensor<T>&, const ad::Tensor<T>&)> l2_feature;
  std::function<ad::Tensor<T>(const ad::Tensor<T>&, std::span<const std::int32_t>)> cross_entropy;
  std::function<loss::WithinStreamLoss<T>(const nn::BlockOutputs<T>&, const loss::DistillOptions&)>
      within_stream;
  std::function<loss::CrossStreamLoss<T>(const nn::BlockOutputs<T>&, const nn::BlockOutputs<T>&,
                                         const loss::DistillOptions&)>
      cross_stream;
  std::function<ad::Tensor<T>(const nn::BlockOutputs<T>&, std::span<const std::int32_t>)>
      classification;

  static LossImpl library();
};

/// Central-difference gradient check of every differentiable op, in double.
std::vector<CheckResult> check_op_gradients(double tolerance);

/// Gradient check of the complete student objective (student role, all five
/// components) on a two-block teacher/student pair with 8x8 inputs and 3 classes.
CheckResult check_student_total_gradient(double tolerance);

/// Each loss component against the explicit-loop oracles on random instances
/// (batch <= 8, m <= 10, C = 3). Results are named "oracle:<function>".
std::vector<CheckResult> check_loss_oracles(const LossImpl& impl, std::size_t instances,
                                            double tolerance, std::uint64_t seed = 7);

/// KL of student [0, 2] against teacher [2, 0] at T = 1 equals 2 tanh(1).
CheckResult check_kl_spot_value(const LossImpl& impl, double tolerance);

/// The teacher's total carries no cross-stream term; the student's does.
CheckResult check_indicator();

/// Student losses never put gradient on teacher parameters.
CheckResult check_detach();

CheckResult check_lr_schedule();

/// All distillation weights at zero reproduce independent CE training of
/// both streams, bit for bit, over `steps` steps.
CheckResult check_zero_weight_equivalence(std::size_t steps);

/// Exported backbone logits equal in-stream logits bitwise; no guided tensors exported.
CheckResult check_export_fidelity(std::size_t samples);

/// Every metrics.csv row has capability_gap == teacher_test_acc - student_test_acc.
CheckResult check_capability_gap(const std::filesystem::path& metrics_csv);
CheckResult check_capability_gap(const std::vector<train::EpochMetrics>& metrics);

struct ToyRunSpec {
  std::size_t train_per_class = 20;
  std::size_t test_per_class = 10;
  std::size_t resolution = 32;
  std::size_t epochs = 2;
  double retain_fraction = 1.0;
  std::size_t downsample_to = 0;  // 0: native
  train::TeacherMode teacher_mode = train::TeacherMode::evolutionary;
  std::uint64_t seed = 5;
};

/// Trains the toy teacher/student pair on synthetic data into `run_dir`.
train::RunArtifacts run_toy(const ToyRunSpec& spec, const std::filesystem::path& run_dir);

/// Two identical single-worker toy runs produce byte-identical metrics and checkpoints.
CheckResult check_determinism(const ToyRunSpec& spec, const std::filesystem::path& work_dir);

/// Subsetting and downsampling arithmetic, plus an end-to-end toy run in each mode.
CheckResult check_few_sample_low_resolution(const std::filesystem::path& work_dir);

enum class Level { fast, full };

/// `fast`: gradients, loss oracles, structural contracts, determinism.
/// `full`: adds toy training runs (determinism at larger size, data regimes).
Report run_suite(Level level, const std::filesystem::path& work_dir,
                 const LossImpl& impl = LossImpl::library());

}  // namespace ekd::verify
