// Microbenchmarks for the kernels that dominate training and inference,
// plus the full-model forward in both attention-sharing modes. Single
// threaded so numbers are comparable across runs.

#include <benchmark/benchmark.h>

#include <vector>

#include "ohf/metrics.hpp"
#include "ohf/model.hpp"
#include "ohf/parallel.hpp"

namespace {

ohf::Tensor<float> rnd(std::vector<int> shape, ohf::Rng& rng, bool leaf = false) {
  std::vector<float> v(static_cast<std::size_t>(ohf::shape_numel(shape)));
  for (auto& e : v) e = static_cast<float>(rng.uniform(-0.5, 0.5));
  return ohf::Tensor<float>::from_values(std::move(shape), std::move(v), leaf);
}

void BM_matmul(benchmark::State& state) {
  ohf::NoGradGuard ng;
  ohf::Rng rng(1);
  const int n = static_cast<int>(state.range(0));
  auto a = rnd({n, n}, rng);
  auto b = rnd({n, n}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(ohf::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n) * n * n);
}
BENCHMARK(BM_matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_conv2d(benchmark::State& state) {
  ohf::NoGradGuard ng;
  ohf::Rng rng(2);
  auto x = rnd({1, 16, 30, 15}, rng);
  auto w = rnd({16, 16, 3, 3}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(ohf::conv2d(x, w, 1, 1));
}
BENCHMARK(BM_conv2d);

void BM_mhsa(benchmark::State& state) {
  ohf::NoGradGuard ng;
  ohf::Rng rng(3);
  const int d = 64;
  auto x = rnd({1, 64, d}, rng);
  ohf::ProjectionSet<float> proj{rnd({d, d}, rng), rnd({d, d}, rng), rnd({d, d}, rng), rnd({d, d}, rng), 4};
  for (auto _ : state) benchmark::DoNotOptimize(ohf::mhsa(x, proj));
}
BENCHMARK(BM_mhsa);

void BM_deform_branch(benchmark::State& state) {
  ohf::NoGradGuard ng;
  ohf::Rng rng(4);
  const int d = 32;
  ohf::LrpParams<float> lp;
  lp.offset_w = rnd({18, d, 3, 3}, rng);
  lp.offset_b = rnd({18}, rng);
  lp.deform_w = rnd({d, d, 3, 3}, rng);
  lp.deform_groups = 1;
  auto x = rnd({1, d, 12, 6}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(ohf::deform_branch(x, lp));
}
BENCHMARK(BM_deform_branch);

ohf::ModelConfig bench_config(ohf::ShareMode mode) {
  ohf::ModelConfig mc;
  mc.stack = ohf::parse_stack("[H_2^{1},H_3^{2}]", 3);
  mc.stack.width = 32;
  mc.stack.heads = 4;
  mc.stack.parts = 2;
  mc.stack.mode = mode;
  mc.input_h = 60;
  mc.input_w = 30;
  mc.num_ids = 8;
  return mc;
}

void forward_mode(benchmark::State& state, ohf::ShareMode mode) {
  ohf::NoGradGuard ng;
  const auto mc = bench_config(mode);
  ohf::Rng rng(5);
  auto mp = ohf::init_model<float>(mc, rng);
  auto image = rnd({1, 3, 60, 30}, rng);
  std::vector<ohf::AttentionRecord<float>>* no_capture = nullptr;
  std::int64_t madds = 0;
  for (auto _ : state) {
    std::vector<ohf::OhLayerStats> stats;
    benchmark::DoNotOptimize(ohf::forward(image, mp, mc, no_capture, &stats));
    madds = 0;
    for (const auto& s : stats) madds += s.score_madds;
  }
  state.counters["score_madds"] = static_cast<double>(madds);
}

void BM_forward_full(benchmark::State& state) { forward_mode(state, ohf::ShareMode::Full); }
void BM_forward_shared(benchmark::State& state) { forward_mode(state, ohf::ShareMode::Shared); }
BENCHMARK(BM_forward_full);
BENCHMARK(BM_forward_shared);

void BM_layer_backward(benchmark::State& state) {
  const auto mc = bench_config(ohf::ShareMode::Shared);
  ohf::Rng rng(6);
  auto mp = ohf::init_model<float>(mc, rng);
  auto x = rnd({2, 1 + 18, 32}, rng, true);
  for (auto _ : state) {
    auto y = ohf::sum_all(ohf::mul(ohf::oh_layer(x, mp.layers[1], 6, 3), ohf::oh_layer(x, mp.layers[1], 6, 3)));
    y.backward();
    benchmark::DoNotOptimize(y.item());
  }
}
BENCHMARK(BM_layer_backward);

void BM_cmc_map(benchmark::State& state) {
  ohf::Rng rng(7);
  const int nq = 100, ng = 100;
  std::vector<int> q_pids(nq), q_cams(nq), g_pids(ng), g_cams(ng);
  for (auto& v : q_pids) v = static_cast<int>(rng.uniform_int(10));
  for (auto& v : q_cams) v = static_cast<int>(rng.uniform_int(2));
  for (auto& v : g_pids) v = static_cast<int>(rng.uniform_int(10));
  for (auto& v : g_cams) v = static_cast<int>(rng.uniform_int(2));
  auto dist = rnd({nq, ng}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(ohf::cmc_map(dist, q_pids, q_cams, g_pids, g_cams));
}
BENCHMARK(BM_cmc_map);

}  // namespace

int main(int argc, char** argv) {
  ohf::set_thread_count(1);
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
