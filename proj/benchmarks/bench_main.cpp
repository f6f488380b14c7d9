#include "kplift/detector.hpp"
#include "kplift/hungarian.hpp"
#include "kplift/lifter.hpp"
#include "kplift/synthetic.hpp"
#include "kplift/tensor.hpp"

#include <benchmark/benchmark.h>

using namespace kplift;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v));
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = random_tensor({n, n}, rng), b = random_tensor({n, n}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(128)->Arg(256);

void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  const Tensor init = random_tensor({n, n}, rng);
  const Tensor a = Tensor::parameter({n, n}, std::vector<double>(init.data().begin(), init.data().end()));
  const Tensor b = random_tensor({n, n}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(gradient_of(sum(matmul(a, b)), {a}));
}
BENCHMARK(BM_MatmulBackward)->Arg(64)->Arg(256);

void BM_Hungarian(benchmark::State& state) {
  const auto n = static_cast<Eigen::Index>(state.range(0));
  Rng rng(3);
  Eigen::MatrixXd cost(n + 4, n);
  for (Eigen::Index i = 0; i < cost.size(); ++i) cost(i) = rng.uniform(0.0, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(hungarian_match(cost));
}
BENCHMARK(BM_Hungarian)->Arg(7)->Arg(14)->Arg(64);

void BM_LifterForward(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  const auto categories = gen_categories(3, 4);
  const CategoryRegistry reg = make_registry(categories);
  const std::size_t k = reg.total_keypoints();
  Rng rng(5);
  const Lifter lifter(LifterConfig{}, k, rng);
  std::vector<int> cats(batch);
  for (std::size_t b = 0; b < batch; ++b) cats[b] = static_cast<int>(b % 3);
  LifterInput in{random_tensor({batch, 2, k}, rng), Tensor::full({batch, k}, 1.0), std::nullopt, cats};
  for (auto _ : state) benchmark::DoNotOptimize(lifter.lift(in, reg));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * batch));
}
BENCHMARK(BM_LifterForward)->Arg(1)->Arg(32);

void BM_DetectorForward(benchmark::State& state) {
  DetectorConfig cfg;
  cfg.max_keypoints = 14;
  cfg.categories = 3;
  Rng rng(6);
  const Detector det(cfg, rng);
  std::vector<ImageRaster> images(static_cast<std::size_t>(state.range(0)), ImageRaster(64, 64));
  for (auto& img : images) {
    for (auto& p : img.pixels) p = rng.uniform(0.0, 1.0);
  }
  for (auto _ : state) benchmark::DoNotOptimize(det.detect(images));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * state.range(0));
}
BENCHMARK(BM_DetectorForward)->Arg(1)->Arg(8);

void BM_SampleAndRender(benchmark::State& state) {
  const auto categories = gen_categories(1, 7);
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(sample_instance(categories[0], seed++, 0.2));
}
BENCHMARK(BM_SampleAndRender);

}  // namespace

BENCHMARK_MAIN();
