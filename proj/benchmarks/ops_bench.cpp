#include <benchmark/benchmark.h>

#include <random>

#include "ekd/ops.hpp"
#include "ekd/presets.hpp"
#include "ekd/trainer.hpp"

using namespace ekd;

namespace {

ad::Tensorf random_tensor(ad::Shape shape, std::uint64_t seed, bool grad = false) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist;
  std::vector<float> v(n);
  for (auto& x : v) x = dist(rng);
  return ad::Tensorf::from(std::move(shape), std::move(v), grad);
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto a = random_tensor({n, n}, 1), b = random_tensor({n, n}, 2);
  ad::NoGradScope ng;
  for (auto _ : state) benchmark::DoNotOptimize(ad::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

void BM_Conv2dForward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  auto x = random_tensor({64, c, 16, 16}, 3), k = random_tensor({c, c, 3, 3}, 4);
  ad::NoGradScope ng;
  for (auto _ : state) benchmark::DoNotOptimize(ad::conv2d(x, k, {1, 1}));
}
BENCHMARK(BM_Conv2dForward)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_Conv2dBackward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) {
    state.PauseTiming();
    auto x = random_tensor({64, c, 16, 16}, 3, true), k = random_tensor({c, c, 3, 3}, 4, true);
    auto y = ad::sum(ad::conv2d(x, k, {1, 1}));
    state.ResumeTiming();
    ad::backward(y);
  }
}
BENCHMARK(BM_Conv2dBackward)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  auto cfg = presets::desk_train_config();
  cfg.teacher_mode = state.range(0) ? train::TeacherMode::evolutionary : train::TeacherMode::none;
  cfg.guided_student = cfg.guided_teacher = state.range(0) != 0;
  auto st = train::TrainState::create(nn::toy_teacher_spec(), nn::toy_student_spec(), cfg);
  const auto d = data::synth_generate(10, 7, 32, 11);
  const auto norm = data::compute_normalization(d);
  std::vector<std::size_t> idx(64);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const auto batch = data::make_batch(d, idx, norm, data::Augmentation{}, 1, 0);
  for (auto _ : state) benchmark::DoNotOptimize(train::train_step(st, cfg, batch, batch));
  state.SetLabel(state.range(0) ? "ekd" : "ce-only");
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
