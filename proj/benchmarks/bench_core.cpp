#include <random>

#include <benchmark/benchmark.h>

#include "advmtl/attack.hpp"
#include "advmtl/decode.hpp"
#include "advmtl/losses.hpp"

namespace {

using namespace advmtl;

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.5);
  Matrix m(rows, cols);
  for (auto& v : m.data) v = n(rng);
  return m;
}

Transcript words(std::size_t n) {
  Transcript y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<WordId>((3 * i + 1) % 40);
  return y;
}

// CTC forward and backward on (T x 41) log-probabilities.
void BM_CtcLoss(benchmark::State& state) {
  const std::size_t T = static_cast<std::size_t>(state.range(0));
  const Transcript y = words(T / 6);
  const Matrix logits = random_matrix(T, 41, 1);
  for (auto _ : state) {
    Tensor z = logits.to_tensor(true);
    Tape::Scope scope;
    Tensor loss = ctc_loss(log_softmax(z, 1), y);
    backward(loss);
    benchmark::DoNotOptimize(z.grad().data());
  }
}
BENCHMARK(BM_CtcLoss)->Arg(12)->Arg(36)->Arg(72);

void BM_CtcPrefixScore(benchmark::State& state) {
  const Matrix lp = Matrix::from_tensor(log_softmax(random_matrix(36, 41, 2).to_tensor(), 1));
  const Transcript g = words(3);
  for (auto _ : state) benchmark::DoNotOptimize(ctc_prefix_score(lp, g, 7));
}
BENCHMARK(BM_CtcPrefixScore);

ModelConfig default_model(bool bidirectional) {
  ModelConfig c;
  c.bidirectional = bidirectional;
  return c;
}

void BM_EncodeBackward(benchmark::State& state) {
  const ModelParams params = init_params(default_model(state.range(0) != 0)).clone(true);
  const Matrix x = random_matrix(36, 16, 3);
  for (auto _ : state) {
    Tensor xt = x.to_tensor(true);
    Tape::Scope scope;
    backward(sum(encode(params, xt)));
    benchmark::DoNotOptimize(xt.grad().data());
  }
}
BENCHMARK(BM_EncodeBackward)->Arg(0)->Arg(1);

void BM_SampleMtlLoss(benchmark::State& state) {
  const ModelParams params = init_params(default_model(true)).clone(true);
  const Matrix x = random_matrix(36, 16, 4);
  const Transcript y = words(6);
  for (auto _ : state) {
    Tape::Scope scope;
    backward(sample_mtl_loss(params, x.to_tensor(), y, 1, {0.7, 0.5, 0.5}).total);
  }
}
BENCHMARK(BM_SampleMtlLoss);

void BM_PgdStep(benchmark::State& state) {
  const ModelParams params = init_params(default_model(true));
  const Matrix x = random_matrix(36, 16, 5);
  const Matrix delta(36, 16, 0.0);
  AttackConfig c;
  c.epsilon = 1.0;
  c.alpha = 0.05;
  c.weights = {1.0, 0.5, state.range(0) / 10.0};
  for (auto _ : state) benchmark::DoNotOptimize(pgd_step(params, x, delta, words(4), c).loss);
}
BENCHMARK(BM_PgdStep)->Arg(0)->Arg(5);

void BM_JointDecode(benchmark::State& state) {
  const ModelParams params = init_params(default_model(true));
  const Matrix x = random_matrix(36, 16, 6);
  for (auto _ : state)
    benchmark::DoNotOptimize(recognize(params, x, {1.0, 0.5, state.range(0) / 10.0}, 12));
}
BENCHMARK(BM_JointDecode)->Arg(0)->Arg(5);

}  // namespace

BENCHMARK_MAIN();
