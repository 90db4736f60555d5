#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "widthlab/corpus.hpp"
#include "widthlab/model.hpp"
#include "widthlab/widen_meta.hpp"

namespace widthlab {

struct AdamWParams {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;

  bool operator==(const AdamWParams&) const = default;
};

enum class SchedKind { kWarmupCosine, kConstant, kFreshCosine };

struct SchedState {
  SchedKind kind = SchedKind::kWarmupCosine;
  double base_lr = 3e-4;
  double min_lr = 3e-5;
  int64_t warmup_steps = 100;
  int64_t total_steps = 2000;
  int64_t offset = 0;  // step at which this schedule began

  bool operator==(const SchedState&) const = default;
};

// warmup_cosine / fresh_cosine: linear 0 -> base_lr over warmup_steps from
// the offset, cosine base_lr -> min_lr at total_steps, clamped beyond.
// constant: base_lr always. Endpoints are exact.
double lr_at(const SchedState& sched, int64_t step);

template <typename T>
struct OptimStateT {
  ParamSet<T> m;
  ParamSet<T> v;
  int64_t t = 0;
  AdamWParams hyper;
};

template <typename T>
struct TrainStateT {
  ModelConfig config;
  ParamSet<T> params;
  OptimStateT<T> optim;
  SchedState sched;
  Rng rng;
  std::optional<WidenMetadata> widen_meta;

  // Artifact bookkeeping carried through checkpoints.
  std::string recipe;       // empty for plain parents
  std::string provenance;
  uint64_t parent_fingerprint = 0;
};

using TrainState = TrainStateT<float>;

// 64-bit copy for high-precision diagnostics.
TrainStateT<double> to_double(const TrainState& state);

TrainState make_train_state(const ModelConfig& cfg, uint64_t init_seed, const AdamWParams& hyper,
                            const SchedState& sched);

// One AdamW step, in place: clip the global gradient norm, update moments,
// increment t, apply the bias-corrected update with decoupled decay at
// lr_at(sched, t). Throws RunAbortError on a non-finite clipped gradient.
template <typename T>
void adamw_step(TrainStateT<T>& state, const ParamSet<T>& grads);

// The update AdamW would apply from the state's current moments, exactly
//   -(eta / (1 - beta1^t)) * m / (sqrt(v) / sqrt(1 - beta2^t) + eps)
//   - eta * lambda * theta
// with eta = lr_at(sched, t). Requires t >= 1; does not mutate the state.
template <typename T>
Tensor<T> effective_update(const TrainStateT<T>& state, int64_t tensor_idx);

// Same formula from explicit moment tensors (used for hypothetical
// next-step updates without mutating a state).
template <typename T>
Tensor<T> effective_update_from(const Tensor<T>& m, const Tensor<T>& v, const Tensor<T>& theta,
                                int64_t t, double eta, const AdamWParams& hyper);

// Global-norm clip factor for a gradient set: min(1, clip/norm). Throws
// RunAbortError when the norm is non-finite.
template <typename T>
double clip_scale(const ParamSet<T>& grads, double grad_clip);

struct EvalSpec {
  int64_t cadence = 200;
  int64_t n_val_batches = 8;
  int64_t micro_batch = 4;
  const PackedDataset* val = nullptr;
};

struct RunLog {
  struct Step {
    int64_t step;  // 1-based within this run
    double train_loss;
    double lr;
  };
  struct Eval {
    int64_t step;  // 0-based within this run; includes 0 and the final step
    double val_loss;
  };
  std::vector<Step> steps;
  std::vector<Eval> evals;
};

// Hooks for per-step diagnostics. before_step sees the raw accumulated
// gradient for the update about to be applied; after_step sees the mutated
// state.
struct StepObserver {
  std::function<void(const TrainState& state, const ParamSet<float>& grads, int64_t step)>
      before_step;
  std::function<void(const TrainState& state, int64_t step)> after_step;
};

// Run n_steps optimizer steps, each consuming plan.accumulation
// micro-batches, evaluating (dropout-free, fixed storage-order validation
// batches) at step 0, every eval.cadence steps, and at the final step.
RunLog train(TrainState& state, const PackedDataset& data, const BatchPlan& plan,
             int64_t start_step, int64_t n_steps, const EvalSpec& eval,
             std::optional<double> dropout_override, const StepObserver* observer = nullptr);

// Fixed storage-order validation batches (cyclic when the split is short).
std::vector<Batch> make_val_batches(const PackedDataset& val, int64_t n_batches,
                                    int64_t micro_batch);

// Checkpoint container: "WLCK", version, length-prefixed JSON metadata
// (config, optimizer hyperparameters, scheduler, step, RNG state, widen
// metadata, provenance), then named f32 tensor sections with checksums.
std::vector<uint8_t> save_checkpoint(const TrainState& state);
TrainState load_checkpoint(const std::vector<uint8_t>& bytes);
void save_checkpoint_file(const TrainState& state, const std::string& path);
TrainState load_checkpoint_file(const std::string& path);

// FNV-1a over a serialized checkpoint; used as the parent fingerprint.
uint64_t fingerprint(const std::vector<uint8_t>& bytes);

}  // namespace widthlab
