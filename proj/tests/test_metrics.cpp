#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "widthlab/errors.hpp"
#include "widthlab/metrics.hpp"
#include "widthlab/runner.hpp"

using namespace widthlab;

namespace {

ModelConfig micro_config(int64_t vocab = 9, int64_t layers = 1) {
  ModelConfig cfg;
  cfg.n_layers = layers;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_head = 4;
  cfg.context_length = 5;
  cfg.vocab_size = vocab;
  cfg.mlp_multiplier = 2.0;
  cfg.tied_head = true;
  return cfg;
}

TrainState plain_state(const ModelConfig& cfg, uint64_t seed) {
  AdamWParams hp;
  SchedState sched;
  sched.kind = SchedKind::kConstant;
  sched.base_lr = 1e-3;
  return make_train_state(cfg, seed, hp, sched);
}

std::vector<Batch> random_batches(const ModelConfig& cfg, int n, uint64_t seed) {
  Rng rng(seed);
  std::vector<Batch> out;
  for (int b = 0; b < n; ++b) {
    Batch batch;
    batch.inputs = Tensor<TokenId>({2, cfg.context_length});
    batch.targets = Tensor<TokenId>({2, cfg.context_length});
    for (int64_t i = 0; i < batch.inputs.size(); ++i) {
      batch.inputs.at(i) = static_cast<TokenId>(rng.below(static_cast<uint64_t>(cfg.vocab_size)));
      batch.targets.at(i) = static_cast<TokenId>(rng.below(static_cast<uint64_t>(cfg.vocab_size)));
    }
    out.push_back(std::move(batch));
  }
  return out;
}

// Brute-force KL oracle: independent double loop over positions and vocab.
double kl_oracle(const TrainState& parent, const TrainState& child, const std::vector<Batch>& batches) {
  double total = 0.0;
  int64_t count = 0;
  for (const Batch& b : batches) {
    const auto tp = forward(parent.params, parent.config, b.inputs, RunMode::kEval, std::nullopt, nullptr);
    const auto tc = forward(child.params, child.config, b.inputs, RunMode::kEval, std::nullopt, nullptr);
    const int64_t bt = tp.logits.dim(0) * tp.logits.dim(1);
    const int64_t v_n = tp.logits.dim(2);
    for (int64_t r = 0; r < bt; ++r) {
      // softmax via plain exp-sum (safe at these magnitudes)
      double zp = 0.0, zc = 0.0;
      for (int64_t v = 0; v < v_n; ++v) {
        zp += std::exp(static_cast<double>(tp.logits.at(r * v_n + v)));
        zc += std::exp(static_cast<double>(tc.logits.at(r * v_n + v)));
      }
      for (int64_t v = 0; v < v_n; ++v) {
        const double pp = std::exp(static_cast<double>(tp.logits.at(r * v_n + v))) / zp;
        const double pc = std::exp(static_cast<double>(tc.logits.at(r * v_n + v))) / zc;
        total += pp * (std::log(pp) - std::log(pc));
      }
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

}  // namespace

TEST_CASE("kl_zero: identical states give zero, brute-force oracle agrees") {
  const ModelConfig cfg = micro_config();
  const TrainState a = plain_state(cfg, 1);
  const TrainState b = plain_state(cfg, 2);
  const auto batches = random_batches(cfg, 3, 4);

  CHECK(std::abs(kl_zero(a, a, batches)) <= 1e-12);
  const double kl = kl_zero(a, b, batches);
  CHECK(kl >= 0.0);
  CHECK(std::abs(kl - kl_oracle(a, b, batches)) <= 1e-10);
}

TEST_CASE("kl_zero: degenerate one-token vocabulary is exactly zero") {
  ModelConfig cfg = micro_config(1);
  const TrainState a = plain_state(cfg, 1);
  const TrainState b = plain_state(cfg, 9);
  Batch batch;
  batch.inputs = Tensor<TokenId>({1, 3});
  batch.targets = Tensor<TokenId>({1, 3});
  CHECK(kl_zero(a, b, {batch}) == 0.0);
}

TEST_CASE("kl non-negativity over random model pairs") {
  const ModelConfig cfg = micro_config(7);
  const auto batches = random_batches(cfg, 2, 8);
  for (uint64_t s = 0; s < 6; ++s) {
    const TrainState a = plain_state(cfg, 100 + s);
    const TrainState b = plain_state(cfg, 200 + s);
    CHECK(kl_zero(a, b, batches) >= 0.0);
  }
}

TEST_CASE("kl_zero rejects vocabulary mismatch") {
  const TrainState a = plain_state(micro_config(9), 1);
  const TrainState b = plain_state(micro_config(8), 1);
  const auto batches = random_batches(micro_config(8), 1, 3);
  CHECK_THROWS_AS(kl_zero(a, b, batches), InputError);
}

TEST_CASE("rms_drift: zero on self, ln 2 under a doubled final block") {
  // 0-layer model: the only block is the final-norm input (the embedding sum),
  // so doubling the embeddings doubles every hidden state.
  ModelConfig cfg = micro_config(9, 0);
  const TrainState a = plain_state(cfg, 3);
  TrainState b = a;
  for (auto& x : b.params[ParamIndex::kTokEmb].data) x *= 2.0f;
  for (auto& x : b.params[ParamIndex::kPosEmb].data) x *= 2.0f;
  const auto batches = random_batches(cfg, 2, 5);
  CHECK(rms_drift(a, a, batches) == 0.0);
  CHECK(rms_drift(a, b, batches) == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("rms_drift flags degenerate zero blocks") {
  ModelConfig cfg = micro_config(9, 0);
  const TrainState a = plain_state(cfg, 3);
  TrainState z = a;
  for (auto& t : z.params.tensors) t.fill(0.0f);
  const auto batches = random_batches(cfg, 1, 5);
  CHECK_THROWS_AS(rms_drift(a, z, batches), InputError);
}

TEST_CASE("escape_ratio boundaries and dense-oracle equality") {
  WidenMetadata meta;
  meta.m = 2;
  TensorWidenRecord rec;
  rec.kind = MapKind::kClone;
  rec.axes = {WidenAxis{0, 2, 2, 1}};
  meta.records.emplace_back("w", rec);

  // clone-symmetric update: escape exactly 0
  Tensor<double> sym({4});
  sym.at(0) = sym.at(1) = 1.5;
  sym.at(2) = sym.at(3) = -0.5;
  auto e0 = escape_ratio<double>(meta, {{"w", sym}});
  REQUIRE(e0.has_value());
  CHECK(*e0 == 0.0);

  // anti-symmetric update: projector annihilates it, escape exactly 1
  Tensor<double> anti({4});
  anti.at(0) = 1.0;
  anti.at(1) = -1.0;
  anti.at(2) = 2.0;
  anti.at(3) = -2.0;
  auto e1 = escape_ratio<double>(meta, {{"w", anti}});
  REQUIRE(e1.has_value());
  CHECK(*e1 == doctest::Approx(1.0).epsilon(1e-12));

  // mixed update vs explicit Pythagoras
  Tensor<double> mixed({4});
  mixed.at(0) = 1.0;
  mixed.at(1) = 3.0;
  mixed.at(2) = 0.0;
  mixed.at(3) = 4.0;
  // projection: [2,2,2,2]; residual [-1,1,-2,2] -> E = 10/(1+9+0+16)
  auto em = escape_ratio<double>(meta, {{"w", mixed}});
  CHECK(*em == doctest::Approx(10.0 / 26.0).epsilon(1e-12));

  // all-zero updates: undefined, reported not-applicable
  Tensor<double> zero({4});
  CHECK(!escape_ratio<double>(meta, {{"w", zero}}).has_value());
  // no covered tensors
  CHECK(!escape_ratio<double>(meta, {{"other", mixed}}).has_value());
}

TEST_CASE("escape bounds hold for random updates under both projector kinds") {
  Rng rng(23);
  WidenMetadata meta;
  meta.m = 2;
  TensorWidenRecord clone_rec;
  clone_rec.kind = MapKind::kClone;
  clone_rec.axes = {WidenAxis{0, 4, 2, 2}, WidenAxis{1, 3, 2, 1}};
  meta.records.emplace_back("c", clone_rec);
  TensorWidenRecord ref_rec;
  ref_rec.kind = MapKind::kRefSlice;
  ref_rec.axes = {WidenAxis{1, 3, 2, 1}};
  meta.records.emplace_back("r", ref_rec);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> c({8, 6});
    Tensor<double> r({5, 6});
    for (auto& v : c.data) v = rng.gaussian();
    for (auto& v : r.data) v = rng.gaussian();
    const auto e = escape_ratio<double>(meta, {{"c", c}, {"r", r}});
    REQUIRE(e.has_value());
    CHECK(*e >= 0.0);
    CHECK(*e <= 1.0 + 1e-12);
  }
}

TEST_CASE("escape on real candidates: symmetric trap vs asymmetric reset") {
  // Briefly trained parent so moments are populated organically.
  KvConfig kv = KvConfig::from_string(
      "model.n_layers = 1\nmodel.d_model = 32\nmodel.n_heads = 1\nmodel.d_head = 32\n"
      "model.context_length = 16\ndata.n_docs = 120\ndata.sub_vocab = 16\n"
      "train.steps = 6\ntrain.micro_batch = 2\ntrain.accumulation = 1\n"
      "study.growth_steps = 6\n");
  const RunConfig cfg = RunConfig::from_kv(std::move(kv));
  const BuiltData data = build_data(cfg.data, cfg.model);
  TrainState parent = make_train_state(cfg.model, 4, cfg.optim, cfg.sched);
  BatchPlan plan;
  plan.micro_batch = 2;
  EvalSpec eval;
  eval.cadence = 0;
  eval.n_val_batches = 2;
  eval.micro_batch = 2;
  eval.val = &data.val;
  train(parent, data.train, plan, 0, 6, eval, std::nullopt, nullptr);

  // First deterministic continuation batch (the update the step would apply).
  BatchIter iter(data.train, plan, 6);
  const std::vector<Batch> first_step = {iter.next()};

  const CandidateState sym = widen_exactcopy(parent, 2, ExactCopyVariant::kSymmetric, 1);
  const CandidateState asym = widen_exactcopy(parent, 2, ExactCopyVariant::kAsymReset, 1);
  const CandidateState scratch = scratch_large(parent, widened_config(parent.config, 2), 1);

  const auto sym64 = to_double(sym.state);
  const auto asym64 = to_double(asym.state);
  const auto e_sym = escape(sym64, first_step);
  const auto e_asym = escape(asym64, first_step);
  REQUIRE(e_sym.has_value());
  REQUIRE(e_asym.has_value());
  MESSAGE("escape symmetric=", *e_sym, " asymreset=", *e_asym);
  CHECK(*e_sym <= 1e-6);
  CHECK(*e_asym > 0.0);
  CHECK(!escape(to_double(scratch.state), first_step).has_value());
}

TEST_CASE("auc: trapezoid values, errors, and refinement invariance") {
  CHECK(auc({{0, 2.0}, {16, 2.0}}) == 32.0);
  CHECK(auc({{0, 4.0}, {128, 2.0}}) == 384.0);
  CHECK_THROWS_AS(auc({{0, 1.0}}), InputError);
  CHECK_THROWS_AS(auc({{0, 1.0}, {0, 2.0}}), InputError);

  Rng rng(31);
  LossTrajectory traj;
  int64_t t = 0;
  for (int i = 0; i < 17; ++i) {
    traj.push_back({t, 2.0 + rng.uniform()});
    t += 1 + static_cast<int64_t>(rng.below(7));
  }
  // an independent re-summation in reverse interval order
  double ref = 0.0;
  for (size_t i = traj.size() - 1; i > 0; --i)
    ref += 0.5 * (traj[i].loss + traj[i - 1].loss) * static_cast<double>(traj[i].step - traj[i - 1].step);
  CHECK(std::abs(auc(traj) - ref) <= 1e-12 * std::abs(ref));

  // inserting a collinear midpoint leaves the area unchanged
  LossTrajectory refined;
  for (size_t i = 0; i + 1 < traj.size(); ++i) {
    refined.push_back(traj[i]);
    const int64_t mid = (traj[i].step + traj[i + 1].step) / 2;
    if (mid > traj[i].step && mid < traj[i + 1].step) {
      const double frac = static_cast<double>(mid - traj[i].step) /
                          static_cast<double>(traj[i + 1].step - traj[i].step);
      refined.push_back({mid, traj[i].loss + frac * (traj[i + 1].loss - traj[i].loss)});
    }
  }
  refined.push_back(traj.back());
  CHECK(std::abs(auc(refined) - auc(traj)) <= 1e-12 * std::abs(auc(traj)));

  // linearity on a shared grid
  LossTrajectory t1 = traj, t2 = traj, mix;
  Rng rng2(5);
  for (auto& p : t2) p.loss = 1.0 + rng2.uniform();
  for (size_t i = 0; i < traj.size(); ++i)
    mix.push_back({traj[i].step, 2.0 * t1[i].loss + 3.0 * t2[i].loss});
  CHECK(std::abs(auc(mix) - (2.0 * auc(t1) + 3.0 * auc(t2))) <= 1e-9);
}

TEST_CASE("probe aggregates: constants, not-applicable, re-summation oracle") {
  std::vector<ProbeEntry> log;
  for (int i = 0; i < 5; ++i) log.push_back({0.25, 0.5, std::nullopt});
  const ProbeAggregates constant = probe_aggregates(log);
  CHECK(constant.mean_kl == 0.25);
  CHECK(constant.mean_rms_drift == 0.5);
  CHECK(!constant.mean_escape.has_value());

  Rng rng(2);
  std::vector<ProbeEntry> rnd;
  double sk = 0.0, sr = 0.0, se = 0.0;
  int ne = 0;
  for (int i = 0; i < 16; ++i) {
    ProbeEntry e;
    e.kl = rng.uniform();
    e.rms_drift = rng.uniform();
    if (i % 3 != 0) {
      e.escape = rng.uniform();
      se += *e.escape;
      ++ne;
    }
    sk += e.kl;
    sr += e.rms_drift;
    rnd.push_back(e);
  }
  const ProbeAggregates agg = probe_aggregates(rnd);
  CHECK(std::abs(agg.mean_kl - sk / 16.0) <= 1e-12);
  CHECK(std::abs(agg.mean_rms_drift - sr / 16.0) <= 1e-12);
  REQUIRE(agg.mean_escape.has_value());
  CHECK(std::abs(*agg.mean_escape - se / ne) <= 1e-12);

  CHECK_THROWS_AS(probe_aggregates({}), InputError);
}
