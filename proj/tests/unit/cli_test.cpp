#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ekd/checkpoint.hpp"
#include "ekd/experiment.hpp"

using namespace ekd;
using cli::ExperimentConfig;
using cli::UsageError;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_experiment(const std::string& tag) {
  auto c = cli::default_experiment();
  c.teacher_preset = "tiny_teacher";
  c.student_preset = "tiny_student";
  c.data.num_classes = 3;
  c.data.resolution = 8;
  c.data.train_per_class = 6;
  c.data.test_per_class = 4;
  c.train.total_epochs = 1;
  c.train.lr_decay_epochs = {1};
  c.train.batch_size = 6;
  c.train.data_workers = 1;
  c.run_dir = fs::temp_directory_path() / ("ekd_cli_test_" + tag);
  fs::remove_all(c.run_dir);
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Config, RoundTripsThroughJson) {
  auto c = cli::default_experiment();
  c.train.seed = 77;
  c.data.retain_fraction = 0.5;
  c.data.downsample_to = 16;
  auto back = cli::experiment_from_json(cli::to_json(c));
  EXPECT_EQ(cli::to_json(back), cli::to_json(c));
  EXPECT_EQ(back.train.seed, 77u);
  EXPECT_EQ(back.student_spec().input_resolution, 16u);
}

TEST(Config, UnknownKeyIsUsageError) {
  try {
    cli::experiment_from_json(R"({"schema_version": 1, "train": {"foo": 1}})");
    FAIL();
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("train.foo"), std::string::npos) << e.what();
  }
}

TEST(Config, SchemaAndTypesChecked) {
  EXPECT_THROW(cli::experiment_from_json(R"({"schema_version": 2})"), UsageError);
  EXPECT_THROW(cli::experiment_from_json(R"({})"), UsageError);
  EXPECT_THROW(cli::experiment_from_json(R"({"schema_version": 1, "train": {"batch_size": "x"}})"),
               UsageError);
  EXPECT_THROW(cli::experiment_from_json("{not json"), UsageError);
  EXPECT_THROW(
      cli::experiment_from_json(R"({"schema_version": 1, "train": {"teacher_mode": "online"}})"),
      UsageError);
  auto c = cli::experiment_from_json(R"({"schema_version": 1})");
  EXPECT_EQ(cli::to_json(c), cli::to_json(cli::default_experiment()));
}

TEST(Config, FixedTeacherNeedsCheckpoint) {
  auto c = tiny_experiment("fixed_needs_ckpt");
  c.train.teacher_mode = train::TeacherMode::fixed;
  std::ostringstream log;
  EXPECT_THROW(cli::cmd_train(c, log), UsageError);
}

TEST(Ablation, GridHasSixRowsEndingInFull) {
  const auto& g = cli::ablation_grid();
  ASSERT_EQ(g.size(), 6u);
  EXPECT_EQ(g.front().name, "KD");
  EXPECT_EQ(g.front().teacher_mode, train::TeacherMode::fixed);
  EXPECT_FALSE(g.front().guided_student);
  EXPECT_EQ(g.back().name, "EKD");
  EXPECT_EQ(g.back().teacher_mode, train::TeacherMode::evolutionary);
  EXPECT_TRUE(g.back().guided_teacher && g.back().guided_student);
}

TEST(Ablation, RunsGridAndPairSweep) {
  auto c = tiny_experiment("ablate");
  c.teacher_preset = "tiny_student";  // same block count as the student
  c.ablation_pair_sweep = true;
  std::ostringstream log;
  const auto rows = cli::cmd_ablate(c, log);
  // six grid rows plus pairs 0 and 1 for a two-block network
  ASSERT_EQ(rows.size(), 8u);
  for (const auto& r : rows) {
    EXPECT_TRUE(r.ok) << r.row << ": " << r.error;
    EXPECT_GE(r.student_test_acc, 0.0);
  }
  EXPECT_EQ(rows[6].guided_pairs, 0u);
  EXPECT_EQ(rows[7].guided_pairs, 1u);
  const std::string csv = slurp(c.run_dir / "ablation.csv");
  EXPECT_EQ(csv.rfind("row,teacher_mode,guided_teacher,guided_student,guided_pairs,status", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 9);
}

TEST(Train, SnapshotRecordsEffectiveConfig) {
  auto c = tiny_experiment("snapshot");
  c.train.seed = 1234;
  std::ostringstream log;
  const auto out = cli::cmd_train(c, log);
  const auto snap = nlohmann::json::parse(slurp(out.run_dir / "config.snapshot.json"));
  EXPECT_EQ(snap["train"]["seed"].get<std::uint64_t>(), 1234u);
  EXPECT_EQ(snap["schema_version"].get<int>(), cli::kSchemaVersion);
  EXPECT_TRUE(fs::exists(out.run_dir / "metrics.csv"));
  EXPECT_TRUE(fs::exists(out.run_dir / "student_last.ekd.json"));
}

TEST(Eval, ExportedAndFullCheckpointsAgree) {
  auto c = tiny_experiment("eval");
  std::ostringstream log;
  const auto out = cli::cmd_train(c, log);
  const fs::path full = out.run_dir / "student_last.ekd";
  const fs::path exported = out.run_dir / "exported.ekd";
  cli::cmd_export(full, exported);
  for (const auto& e : io::read_checkpoint(exported).entries) {
    EXPECT_EQ(e.name.rfind("backbone.", 0), 0u) << e.name;
  }
  std::ostringstream a, b;
  const auto ra = cli::cmd_eval(c, full, a);
  const auto rb = cli::cmd_eval(c, exported, b);
  EXPECT_EQ(ra.accuracy, rb.accuracy);
  EXPECT_EQ(ra.accuracy, out.artifacts.final_student_test_acc);
  EXPECT_EQ(ra.samples, 12u);
  EXPECT_EQ(a.str().rfind("accuracy ", 0), 0u);
  // four decimals
  const auto text = a.str();
  const auto dot = text.find('.');
  ASSERT_NE(dot, std::string::npos);
  EXPECT_EQ(text.find(' ', dot) - dot - 1, 4u) << text;
}

TEST(Eval, WritesEmbeddings) {
  auto c = tiny_experiment("embed");
  std::ostringstream log;
  const auto out = cli::cmd_train(c, log);
  const fs::path emb = out.run_dir / "emb.bin";
  std::ostringstream o;
  cli::cmd_eval(c, out.run_dir / "student_last.ekd", o, emb);
  const std::string bytes = slurp(emb);
  ASSERT_GE(bytes.size(), 16u);
  std::uint64_t count = 0, dim = 0;
  std::memcpy(&count, bytes.data(), 8);
  std::memcpy(&dim, bytes.data() + 8, 8);
  EXPECT_EQ(count, 12u);
  EXPECT_EQ(bytes.size(), 16 + count * dim * 4);
}

TEST(Eval, MissingCheckpointFails) {
  auto c = tiny_experiment("eval_missing");
  std::ostringstream o;
  EXPECT_ANY_THROW(cli::cmd_eval(c, c.run_dir / "nope.ekd", o));
}

TEST(Pretrain, CheckpointFeedsFixedTeacher) {
  auto c = tiny_experiment("pretrain");
  std::ostringstream log;
  const auto pre = cli::cmd_pretrain(c, log);
  ASSERT_TRUE(fs::exists(pre.run_dir / "pretrained.ekd"));
  auto f = tiny_experiment("pretrain_fixed");
  f.train.teacher_mode = train::TeacherMode::fixed;
  f.teacher_checkpoint = (pre.run_dir / "pretrained.ekd").string();
  const auto out = cli::cmd_train(f, log);
  ASSERT_EQ(out.artifacts.metrics.size(), 1u);
  EXPECT_EQ(out.artifacts.final_teacher_test_acc, pre.artifacts.final_student_test_acc);
}

TEST(Ablation, PairSweepOverThreeBlocks) {
  auto c = tiny_experiment("sweep3");
  c.teacher_preset = "toy_teacher";
  c.student_preset = "toy_student";
  c.data.train_per_class = 2;
  c.data.test_per_class = 1;
  c.ablation_pair_sweep = true;
  std::ostringstream log;
  const auto rows = cli::cmd_ablate(c, log);
  ASSERT_EQ(rows.size(), 9u);
  for (std::size_t p = 0; p < 3; ++p) {
    EXPECT_EQ(rows[6 + p].guided_pairs, p);
    EXPECT_TRUE(rows[6 + p].ok) << rows[6 + p].error;
  }
}
