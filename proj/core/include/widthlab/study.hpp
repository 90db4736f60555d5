#pragma once

#include <optional>
#include <string>
#include <vector>

#include "widthlab/metrics.hpp"

namespace widthlab {

enum class RegimeKind { kDeterministic, kStochastic };

const char* regime_name(RegimeKind r);
RegimeKind regime_from_name(const std::string& name);

// One cell of the experimental grid.
struct Setting {
  std::string seed_label;  // "S0", "S1", ...
  int64_t growth_step = 0;
  RegimeKind regime = RegimeKind::kDeterministic;
  int64_t horizon = 16;

  // "S0 / 1000 / 128D" in tables, "S0_g1000_128D" on disk.
  std::string label() const;
  std::string dir_name() const;
  bool same_family(const Setting& o) const {
    return seed_label == o.seed_label && growth_step == o.growth_step && regime == o.regime;
  }
  bool operator==(const Setting&) const = default;
};

struct CandidateReport {
  std::string recipe;
  bool valid = true;
  std::string failure;  // reason when invalid
  ZeroStepReport zero_step;
  LossTrajectory trajectory;
  double auc_value = 0.0;
  // Probe-length runs aggregate their own per-step diagnostics; long runs
  // carry the matching probe's aggregates so probe selectors can rank them.
  std::optional<ProbeAggregates> probe;
};

struct ContinuationReport {
  Setting setting;
  std::vector<CandidateReport> candidates;
  std::string provenance;

  std::optional<size_t> winner() const;  // argmin AUC among valid candidates
  const CandidateReport* find(const std::string& recipe) const;
};

enum class SelectorKind { kZeroLoss, kZeroKl, kProbeKl, kProbeRms, kProbeEscape };

const char* selector_display_name(SelectorKind s);  // "Probe KL"
const char* selector_key(SelectorKind s);           // "probe_mean_kl"
std::vector<SelectorKind> all_selectors();

struct SelectorResult {
  SelectorKind selector = SelectorKind::kZeroLoss;
  bool evaluable = false;
  std::string note;                   // exclusions or why not evaluable
  std::vector<std::string> tie_set;   // picked candidates (ties within 1e-12 relative)
  double regret_best_tie = 0.0;
  double regret_worst_tie = 0.0;
  std::optional<double> spearman_to_utility;
};

// Rank correlation with average ranks on (exact) ties; both inputs ranked
// ascending. nullopt when fewer than two points.
std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b);

// Rank candidates per selector (argmin, except probe escape which is
// argmax), resolve ties within relative 1e-12 into a tie set, and score
// best-/worst-tie top-1 regret against the utility winner.
std::vector<SelectorResult> evaluate_selectors(const ContinuationReport& report);

struct MiniLagRow {
  Setting target;
  std::string auc_pick;
  double auc_pick_regret = 0.0;
  std::string final_pick;
  double final_pick_regret = 0.0;
  std::optional<double> spearman_16_vs_128;
};

// Use the matching 16-step report directly as a selector for the 128-step
// target: its AUC pick, its final-loss pick, and the rank correlation of
// its AUC ordering with target utility.
MiniLagRow minilag_baselines(const ContinuationReport& probe16, const ContinuationReport& target);

struct SettingSelectors {
  Setting setting;
  std::vector<SelectorResult> results;
};

struct SelectorAggregate {
  SelectorKind selector = SelectorKind::kZeroLoss;
  int64_t settings_counted = 0;
  double mean_regret = 0.0;  // best-tie
  double max_regret = 0.0;
  int64_t zero_regret_settings = 0;
  std::optional<double> mean_spearman;
};

std::vector<SelectorAggregate> aggregate_selectors(const std::vector<SettingSelectors>& settings);

struct StudyTable {
  std::vector<ContinuationReport> reports;

  const ContinuationReport* find(const std::string& seed_label, int64_t growth_step,
                                 RegimeKind regime, int64_t horizon) const;
  std::vector<SettingSelectors> selectors_per_setting() const;
  std::vector<MiniLagRow> minilag_rows() const;
};

struct ClaimAuditRow {
  std::string claim_id;
  std::string statement;
  bool pass = false;
  std::string support;
};

// The five standing claims checked against whatever evidence the study
// holds: exact-copy wins short settings, ref-subspace wins deterministic
// long settings, exact-copy wins stochastic long settings, probe KL has the
// lowest mean best-tie regret, probe escape is exact only in deterministic
// long settings.
std::vector<ClaimAuditRow> claim_audit(const StudyTable& study);

// Markdown tables (regime summary, selector regret, mini-lag, evidence
// matrix, selector aggregate, claim audit) under <out_dir>/tables and the
// two figure CSVs under <out_dir>/figures. Writes are atomic
// (write-then-rename). Returns the emitted paths.
std::vector<std::string> emit_tables(const StudyTable& study, const std::string& out_dir);

// Report store: one directory per setting holding report.jsonl (one record
// per candidate plus a leading setting record).
void write_report(const ContinuationReport& report, const std::string& dir);
ContinuationReport read_report(const std::string& dir);
StudyTable read_study(const std::string& settings_root);

// Fixed-precision helper used by every emitted table (4 decimals).
std::string fmt4(double v);

}  // namespace widthlab
