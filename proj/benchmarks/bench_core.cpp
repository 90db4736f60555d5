#include <benchmark/benchmark.h>

#include "widthlab/metrics.hpp"
#include "widthlab/widen.hpp"

using namespace widthlab;

namespace {

ModelConfig bench_config(int64_t d_model) {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = d_model;
  cfg.n_heads = d_model / 32;
  cfg.d_head = 32;
  cfg.context_length = 64;
  cfg.vocab_size = kByteVocabSize;
  cfg.mlp_multiplier = 4.0;
  cfg.tied_head = true;
  return cfg;
}

Batch random_batch(const ModelConfig& cfg, int64_t rows, uint64_t seed) {
  Rng rng(seed);
  Batch b;
  b.inputs = Tensor<TokenId>({rows, cfg.context_length});
  b.targets = Tensor<TokenId>({rows, cfg.context_length});
  for (int64_t i = 0; i < b.inputs.size(); ++i) {
    b.inputs.at(i) = static_cast<TokenId>(rng.below(static_cast<uint64_t>(cfg.vocab_size)));
    b.targets.at(i) = static_cast<TokenId>(rng.below(static_cast<uint64_t>(cfg.vocab_size)));
  }
  return b;
}

void BM_forward(benchmark::State& state) {
  const ModelConfig cfg = bench_config(state.range(0));
  const ParamSet<float> params = init_model<float>(cfg, 1);
  const Batch b = random_batch(cfg, 4, 2);
  for (auto _ : state) {
    const auto trace = forward(params, cfg, b.inputs, RunMode::kEval, std::nullopt, nullptr);
    benchmark::DoNotOptimize(trace.logits.ptr());
  }
  state.SetItemsProcessed(state.iterations() * 4 * cfg.context_length);
}
BENCHMARK(BM_forward)->Arg(64)->Arg(128);

void BM_loss_and_grad(benchmark::State& state) {
  const ModelConfig cfg = bench_config(state.range(0));
  const ParamSet<float> params = init_model<float>(cfg, 1);
  const std::vector<Batch> batches = {random_batch(cfg, 4, 2)};
  for (auto _ : state) {
    const auto lg = loss_and_grad(params, cfg, batches, RunMode::kEval, std::nullopt, nullptr);
    benchmark::DoNotOptimize(lg.loss);
  }
  state.SetItemsProcessed(state.iterations() * 4 * cfg.context_length);
}
BENCHMARK(BM_loss_and_grad)->Arg(64)->Arg(128);

void BM_adamw_step(benchmark::State& state) {
  const ModelConfig cfg = bench_config(state.range(0));
  AdamWParams hp;
  SchedState sched;
  sched.kind = SchedKind::kConstant;
  sched.base_lr = 3e-4;
  TrainState st = make_train_state(cfg, 1, hp, sched);
  ParamSet<float> grads = zeros_like_layout<float>(cfg);
  Rng rng(4);
  for (auto& t : grads.tensors) {
    for (auto& v : t.data) v = static_cast<float>(1e-3 * rng.gaussian());
  }
  for (auto _ : state) {
    adamw_step(st, grads);
    benchmark::DoNotOptimize(st.optim.t);
  }
  state.SetItemsProcessed(state.iterations() * param_count(cfg));
}
BENCHMARK(BM_adamw_step)->Arg(64)->Arg(128);

void BM_widen_exactcopy(benchmark::State& state) {
  const ModelConfig cfg = bench_config(64);
  AdamWParams hp;
  SchedState sched;
  sched.kind = SchedKind::kWarmupCosine;
  TrainState parent = make_train_state(cfg, 1, hp, sched);
  parent.optim.t = 100;
  for (auto _ : state) {
    const CandidateState c = widen_exactcopy(parent, 2, ExactCopyVariant::kSymmetric, 1);
    benchmark::DoNotOptimize(c.state.params[0].ptr());
  }
}
BENCHMARK(BM_widen_exactcopy);

void BM_escape(benchmark::State& state) {
  const ModelConfig cfg = bench_config(64);
  AdamWParams hp;
  SchedState sched;
  sched.kind = SchedKind::kWarmupCosine;
  TrainState parent = make_train_state(cfg, 1, hp, sched);
  parent.optim.t = 100;
  const CandidateState child = widen_exactcopy(parent, 2, ExactCopyVariant::kAsymReset, 1);
  const std::vector<Batch> batches = {random_batch(child.state.config, 4, 9)};
  for (auto _ : state) {
    const auto e = escape(child.state, batches);
    benchmark::DoNotOptimize(e);
  }
}
BENCHMARK(BM_escape);

}  // namespace

BENCHMARK_MAIN();
