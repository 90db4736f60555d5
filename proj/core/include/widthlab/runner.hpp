#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "widthlab/config.hpp"
#include "widthlab/study.hpp"

namespace widthlab {

// Worker cap: WIDTHLAB_THREADS when set, else the hardware thread count.
int worker_threads();

struct BuiltData {
  PackedDataset train;
  PackedDataset val;
  std::string provenance;
};

// Synthetic / text / token-file corpus packed into rows of
// context_length + 1 and split into train/val.
BuiltData build_data(const DataConfig& data, const ModelConfig& model);

struct ParentRun {
  TrainState final_state;
  RunLog log;
  // One snapshot per requested growth step, in ascending step order.
  std::vector<std::pair<int64_t, TrainState>> snapshots;
};

// Train a parent from scratch under the config, snapshotting the full
// training state at every growth step.
ParentRun train_parent(const RunConfig& cfg, int64_t seed_value, const BuiltData& data,
                       std::ostream& log);

// Shared per-report evaluation context: fixed validation batches, the
// seeded diagnostic batch list, and the parent's traces on it.
struct DiagContext {
  std::vector<Batch> val_batches;
  std::vector<Batch> diag_batches;
  std::vector<ForwardTrace<float>> parent_diag_traces;
  std::string provenance;
};

DiagContext make_diag_context(const TrainState& parent, const BuiltData& data,
                              const RunConfig& cfg, uint64_t diag_seed);

// Zero-step report first, then the continuation under the regime's
// order/dropout policy with the candidate's own scheduler. Probe-length
// runs collect per-step diagnostics. A non-finite loss marks the candidate
// invalid instead of dropping it.
CandidateReport run_candidate(const CandidateState& candidate, const Setting& setting,
                              const BuiltData& data, const RunConfig& cfg,
                              const DiagContext& diag, bool collect_probe);

// One grid cell over the whole pool (candidates run concurrently).
ContinuationReport run_setting(const std::vector<CandidateState>& pool, const Setting& setting,
                               const BuiltData& data, const RunConfig& cfg,
                               const DiagContext& diag, bool collect_probe);

struct StudyRunResult {
  StudyTable table;
  std::vector<std::string> written_files;
};

// The full grid: parents per seed, candidates per growth step, probes and
// continuations per regime, report store and tables under out_dir.
StudyRunResult run_study(const RunConfig& cfg, const std::string& out_dir, std::ostream& log);

// Build the pool for one parent snapshot (deterministic per-recipe seeds).
std::vector<CandidateState> build_pool(const TrainState& parent, const RunConfig& cfg,
                                       int64_t seed_value);

void write_provenance(const std::string& out_dir, const std::string& resolved_config);

}  // namespace widthlab
