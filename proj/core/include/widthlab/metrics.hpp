#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "widthlab/train_state.hpp"
#include "widthlab/widen.hpp"

namespace widthlab {

// Diagnostics computed before any continuation step.
struct ZeroStepReport {
  double val_loss = 0.0;
  double kl0 = 0.0;
  double rms_drift = 0.0;
  std::optional<double> escape;  // nullopt: not applicable
};

struct TrajPoint {
  int64_t step;
  double loss;
};
using LossTrajectory = std::vector<TrajPoint>;

// Mean over batch and time of sum_v p_parent(v) * (log p_parent(v) -
// log p_child(v)), 64-bit log-sum-exp, averaged over all provided batches.
template <typename T>
double kl_zero(const TrainStateT<T>& parent, const TrainStateT<T>& child,
               const std::vector<Batch>& val_batches);

// Same, against precomputed parent traces (one per batch).
template <typename T>
double kl_zero_vs(const std::vector<ForwardTrace<T>>& parent_traces, const TrainStateT<T>& child,
                  const std::vector<Batch>& batches);

// (1/L) sum_l |log(RMS(child block l) / RMS(parent block l))| with the
// final-norm input as block L, averaged over the provided batches. Throws
// on a zero-RMS block.
template <typename T>
double rms_drift(const TrainStateT<T>& parent, const TrainStateT<T>& child,
                 const std::vector<Batch>& batches);

template <typename T>
double rms_drift_vs(const std::vector<ForwardTrace<T>>& parent_traces, const TrainStateT<T>& child,
                    const std::vector<Batch>& batches);

// Cloned-subspace escape on the effective AdamW update the candidate would
// apply next: gradients on the batch set (dropout-free), hypothetical
// moment update, Delta at t+1, projected per widened tensor:
//   E = sum_j ||Delta_j - Pi_j(Delta_j)||^2 / sum_j ||Delta_j||^2.
// nullopt when the candidate has no widen metadata or all updates are zero.
template <typename T>
std::optional<double> escape(const TrainStateT<T>& candidate, const std::vector<Batch>& batches);

// Escape from already-formed per-tensor updates (oracle-friendly core).
template <typename T>
std::optional<double> escape_ratio(const WidenMetadata& meta,
                                   const std::vector<std::pair<std::string, Tensor<T>>>& deltas);

// Escape from a precomputed gradient set (shares the gradient with the
// training step that is about to consume it).
template <typename T>
std::optional<double> escape_from_grads(const TrainStateT<T>& candidate, const ParamSet<T>& grads);

// Trapezoidal area under a validation-loss trajectory; lower is better.
// Requires at least two strictly increasing, finite points.
double auc(const LossTrajectory& traj);

struct ProbeEntry {
  double kl = 0.0;
  double rms_drift = 0.0;
  std::optional<double> escape;
};

struct ProbeAggregates {
  double mean_kl = 0.0;
  double mean_rms_drift = 0.0;
  std::optional<double> mean_escape;  // over applicable entries only
};

ProbeAggregates probe_aggregates(const std::vector<ProbeEntry>& probe_log);

// Zero-step bundle: validation loss on the shared eval batches, KL/RMS
// drift/escape on the shared diagnostic batches.
ZeroStepReport zero_step_report(const TrainState& parent, const TrainState& candidate,
                                const std::vector<Batch>& val_batches,
                                const std::vector<Batch>& diag_batches);

}  // namespace widthlab
