// ekd: command-line front end for pretraining, training, ablations, evaluation,
// export and the verification suite.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ekd/checkpoint.hpp"
#include "ekd/experiment.hpp"
#include "ekd/verify/checks.hpp"

namespace fs = std::filesystem;
using namespace ekd;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::optional<std::size_t> workers;
};

cli::ExperimentConfig resolve(const Globals& g) {
  auto c = g.config_path.empty() ? cli::default_experiment() : cli::load_experiment(g.config_path);
  if (g.seed) c.train.seed = *g.seed;
  if (!g.out_dir.empty()) c.run_dir = g.out_dir;
  if (g.workers) c.train.data_workers = *g.workers;
  c.validate();
  return c;
}

verify::LossImpl mutated(const std::string& name) {
  auto impl = verify::LossImpl::library();
  if (name.empty()) return impl;
  if (name == "kl_sign") {
    auto kl = impl.kl_distill;
    impl.kl_distill = [kl](const auto& s, const auto& t, double temp, bool t2) {
      return ad::scalar_mul(kl(s, t, temp, t2), -1.0);
    };
  } else if (name == "l2_scale") {
    auto l2 = impl.l2_feature;
    impl.l2_feature = [l2](const auto& a, const auto& b) {
      return ad::scalar_mul(l2(a, b), 2.0);
    };
  } else {
    throw cli::UsageError("unknown mutation '" + name + "'");
  }
  return impl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Evolutionary knowledge distillation: training and verification"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "Experiment config (JSON)");
  app.add_option("--seed", g.seed, "Override train.seed");
  app.add_option("--out-dir", g.out_dir, "Override run_dir");
  app.add_option("--workers", g.workers, "Override train.data_workers");

  auto* pretrain = app.add_subcommand("pretrain", "Train the teacher preset alone (writes pretrained.ekd)");
  auto* train = app.add_subcommand("train", "Run teacher/student training");
  auto* ablate = app.add_subcommand("ablate", "Run the six-row ablation grid");
  bool pair_sweep = false;
  ablate->add_flag("--pair-sweep", pair_sweep, "Also sweep the number of guided pairs");

  auto* eval = app.add_subcommand("eval", "Top-1 accuracy of a student checkpoint on the test split");
  std::string eval_ckpt;
  eval->add_option("checkpoint", eval_ckpt, "Full-stream or exported checkpoint")->required();
  std::string eval_embed;
  eval->add_option("--embeddings", eval_embed, "Also write pre-classifier features here");

  auto* exp = app.add_subcommand("export", "Strip guided modules from a stream checkpoint");
  std::string exp_in, exp_out;
  exp->add_option("checkpoint", exp_in)->required();
  exp->add_option("output", exp_out)->required();

  auto* ver = app.add_subcommand("verify", "Gradient checks, loss oracles and contracts");
  std::string level;
  ver->add_option("--level", level, "fast or full")->check(CLI::IsMember({"fast", "full"}));
  std::string mutation;
  ver->add_option("--mutate", mutation)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*exp) {
      cli::cmd_export(exp_in, exp_out);
      std::cout << "exported " << exp_out << "\n";
      return kOk;
    }
    if (*ver) {
      verify::Level lv = verify::Level::fast;
      std::string requested = level;
      if (requested.empty() && !g.config_path.empty()) requested = resolve(g).verify_level;
      if (requested == "full") lv = verify::Level::full;
      const fs::path work = g.out_dir.empty() ? fs::temp_directory_path() / "ekd-verify" : fs::path(g.out_dir);
      fs::create_directories(work);
      const auto report = verify::run_suite(lv, work, mutated(mutation));
      std::cout << report.render();
      std::cout << (report.passed() ? "verify: all checks passed\n" : "verify: FAILED\n");
      return report.passed() ? kOk : kFailure;
    }

    auto config = resolve(g);
    if (*pretrain) {
      cli::cmd_pretrain(config, std::cout);
    } else if (*train) {
      cli::cmd_train(config, std::cout);
    } else if (*ablate) {
      if (pair_sweep) config.ablation_pair_sweep = true;
      const auto rows = cli::cmd_ablate(config, std::cout);
      bool ok = true;
      for (const auto& r : rows) {
        std::printf("%-14s %s student %.4f teacher %.4f\n", r.row.c_str(), r.ok ? "ok    " : "FAILED",
                    r.student_test_acc, r.teacher_test_acc);
        ok = ok && r.ok;
      }
      return ok ? kOk : kFailure;
    } else if (*eval) {
      cli::cmd_eval(config, eval_ckpt, std::cout, eval_embed);
    }
    return kOk;
  } catch (const cli::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}
