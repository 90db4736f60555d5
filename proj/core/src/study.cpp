#include "widthlab/study.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "widthlab/errors.hpp"

namespace widthlab {

namespace fs = std::filesystem;
using nlohmann::json;

const char* regime_name(RegimeKind r) {
  return r == RegimeKind::kDeterministic ? "deterministic" : "stochastic";
}

RegimeKind regime_from_name(const std::string& name) {
  if (name == "deterministic") return RegimeKind::kDeterministic;
  if (name == "stochastic") return RegimeKind::kStochastic;
  throw ConfigError("unknown regime '" + name + "'");
}

std::string Setting::label() const {
  std::ostringstream os;
  os << seed_label << " / " << growth_step << " / " << horizon
     << (regime == RegimeKind::kDeterministic ? "D" : "S");
  return os.str();
}

std::string Setting::dir_name() const {
  std::ostringstream os;
  os << seed_label << "_g" << growth_step << "_" << horizon
     << (regime == RegimeKind::kDeterministic ? "D" : "S");
  return os.str();
}

std::optional<size_t> ContinuationReport::winner() const {
  std::optional<size_t> best;
  for (size_t i = 0; i < candidates.size(); ++i) {
    if (!candidates[i].valid) continue;
    if (!best.has_value() || candidates[i].auc_value < candidates[*best].auc_value) best = i;
  }
  return best;
}

const CandidateReport* ContinuationReport::find(const std::string& recipe) const {
  for (const auto& c : candidates) {
    if (c.recipe == recipe) return &c;
  }
  return nullptr;
}

const char* selector_display_name(SelectorKind s) {
  switch (s) {
    case SelectorKind::kZeroLoss: return "Zero-step loss";
    case SelectorKind::kZeroKl: return "Zero-step KL";
    case SelectorKind::kProbeKl: return "Probe KL";
    case SelectorKind::kProbeRms: return "Probe RMS";
    case SelectorKind::kProbeEscape: return "Probe Escape";
  }
  throw ConfigError("unknown selector");
}

const char* selector_key(SelectorKind s) {
  switch (s) {
    case SelectorKind::kZeroLoss: return "zero_step_val_loss";
    case SelectorKind::kZeroKl: return "zero_step_kl";
    case SelectorKind::kProbeKl: return "probe_mean_kl";
    case SelectorKind::kProbeRms: return "probe_mean_rms_drift";
    case SelectorKind::kProbeEscape: return "probe_mean_escape";
  }
  throw ConfigError("unknown selector");
}

std::vector<SelectorKind> all_selectors() {
  return {SelectorKind::kZeroLoss, SelectorKind::kZeroKl, SelectorKind::kProbeKl,
          SelectorKind::kProbeRms, SelectorKind::kProbeEscape};
}

namespace {

std::optional<double> selector_metric(const CandidateReport& c, SelectorKind s) {
  switch (s) {
    case SelectorKind::kZeroLoss: return c.zero_step.val_loss;
    case SelectorKind::kZeroKl: return c.zero_step.kl0;
    case SelectorKind::kProbeKl:
      if (!c.probe.has_value()) return std::nullopt;
      return c.probe->mean_kl;
    case SelectorKind::kProbeRms:
      if (!c.probe.has_value()) return std::nullopt;
      return c.probe->mean_rms_drift;
    case SelectorKind::kProbeEscape:
      if (!c.probe.has_value()) return std::nullopt;
      return c.probe->mean_escape;
  }
  return std::nullopt;
}

bool selector_is_argmax(SelectorKind s) { return s == SelectorKind::kProbeEscape; }

bool near_tie(double a, double b) {
  return std::abs(a - b) <= 1e-12 * std::max(std::abs(a), std::abs(b));
}

// Average ranks (1-based) with exact-equality tie groups.
std::vector<double> average_ranks(const std::vector<double>& v) {
  const size_t n = v.size();
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

std::string format_shortest(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void atomic_write(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot open for writing: " + path);
    out << content;
    if (!out) throw LoadError("write failed: " + path);
  }
  fs::rename(tmp, path);
}

}  // namespace

std::string fmt4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return std::string(buf);
}

std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw InputError("spearman: length mismatch");
  const size_t n = a.size();
  if (n < 2) return std::nullopt;
  const std::vector<double> ra = average_ranks(a);
  const std::vector<double> rb = average_ranks(b);
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < n; ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (size_t i = 0; i < n; ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) return std::nullopt;  // constant ranking
  return cov / std::sqrt(va * vb);
}

std::vector<SelectorResult> evaluate_selectors(const ContinuationReport& report) {
  std::vector<size_t> valid;
  for (size_t i = 0; i < report.candidates.size(); ++i) {
    if (report.candidates[i].valid) valid.push_back(i);
  }
  double u_min = 0.0;
  if (!valid.empty()) {
    u_min = report.candidates[valid[0]].auc_value;
    for (size_t i : valid) u_min = std::min(u_min, report.candidates[i].auc_value);
  }

  std::vector<SelectorResult> out;
  for (SelectorKind s : all_selectors()) {
    SelectorResult r;
    r.selector = s;
    std::vector<size_t> rankable;
    std::string excluded;
    for (size_t i : valid) {
      if (selector_metric(report.candidates[i], s).has_value()) {
        rankable.push_back(i);
      } else {
        excluded += (excluded.empty() ? "excluded: " : ", ") + report.candidates[i].recipe;
      }
    }
    if (!excluded.empty()) r.note = excluded + " (metric not applicable)";
    if (rankable.size() < 2) {
      r.evaluable = false;
      r.note += std::string(r.note.empty() ? "" : "; ") + "fewer than 2 rankable candidates";
      out.push_back(std::move(r));
      continue;
    }
    r.evaluable = true;

    const bool argmax = selector_is_argmax(s);
    double best = *selector_metric(report.candidates[rankable[0]], s);
    for (size_t i : rankable) {
      const double v = *selector_metric(report.candidates[i], s);
      if (argmax ? v > best : v < best) best = v;
    }
    double tie_u_min = 0.0, tie_u_max = 0.0;
    bool first = true;
    for (size_t i : rankable) {
      const double v = *selector_metric(report.candidates[i], s);
      if (!near_tie(v, best)) continue;
      r.tie_set.push_back(report.candidates[i].recipe);
      const double u = report.candidates[i].auc_value;
      if (first) {
        tie_u_min = tie_u_max = u;
        first = false;
      } else {
        tie_u_min = std::min(tie_u_min, u);
        tie_u_max = std::max(tie_u_max, u);
      }
    }
    r.regret_best_tie = tie_u_min - u_min;
    r.regret_worst_tie = tie_u_max - u_min;

    std::vector<double> prefs, utils;
    for (size_t i : rankable) {
      const double v = *selector_metric(report.candidates[i], s);
      prefs.push_back(argmax ? -v : v);
      utils.push_back(report.candidates[i].auc_value);
    }
    r.spearman_to_utility = spearman(prefs, utils);
    out.push_back(std::move(r));
  }
  return out;
}

MiniLagRow minilag_baselines(const ContinuationReport& probe16, const ContinuationReport& target) {
  if (!probe16.setting.same_family(target.setting))
    throw InputError("minilag: probe and target settings differ in seed/growth/regime");
  auto recipes_of = [](const ContinuationReport& r) {
    std::vector<std::string> names;
    for (const auto& c : r.candidates) names.push_back(c.recipe);
    std::sort(names.begin(), names.end());
    return names;
  };
  if (recipes_of(probe16) != recipes_of(target))
    throw InputError("minilag: candidate pools do not match");

  std::vector<std::string> common;
  for (const auto& c : probe16.candidates) {
    const CandidateReport* t = target.find(c.recipe);
    if (c.valid && t != nullptr && t->valid) common.push_back(c.recipe);
  }
  if (common.size() < 2) throw InputError("minilag: fewer than 2 candidates valid in both reports");

  double u_min = target.find(common[0])->auc_value;
  for (const auto& r : target.candidates) {
    if (r.valid) u_min = std::min(u_min, r.auc_value);
  }

  MiniLagRow row;
  row.target = target.setting;
  std::string auc_pick = common[0];
  std::string final_pick = common[0];
  for (const auto& name : common) {
    const CandidateReport* p = probe16.find(name);
    if (p->auc_value < probe16.find(auc_pick)->auc_value) auc_pick = name;
    if (p->trajectory.back().loss < probe16.find(final_pick)->trajectory.back().loss)
      final_pick = name;
  }
  row.auc_pick = auc_pick;
  row.auc_pick_regret = target.find(auc_pick)->auc_value - u_min;
  row.final_pick = final_pick;
  row.final_pick_regret = target.find(final_pick)->auc_value - u_min;

  std::vector<double> a16, a128;
  for (const auto& name : common) {
    a16.push_back(probe16.find(name)->auc_value);
    a128.push_back(target.find(name)->auc_value);
  }
  row.spearman_16_vs_128 = spearman(a16, a128);
  return row;
}

std::vector<SelectorAggregate> aggregate_selectors(const std::vector<SettingSelectors>& settings) {
  std::vector<SelectorAggregate> out;
  for (SelectorKind s : all_selectors()) {
    SelectorAggregate agg;
    agg.selector = s;
    double sp_sum = 0.0;
    int64_t sp_n = 0;
    for (const SettingSelectors& set : settings) {
      for (const SelectorResult& r : set.results) {
        if (r.selector != s || !r.evaluable) continue;
        ++agg.settings_counted;
        agg.mean_regret += r.regret_best_tie;
        agg.max_regret = std::max(agg.max_regret, r.regret_best_tie);
        if (r.regret_best_tie == 0.0) ++agg.zero_regret_settings;
        if (r.spearman_to_utility.has_value()) {
          sp_sum += *r.spearman_to_utility;
          ++sp_n;
        }
      }
    }
    if (agg.settings_counted > 0) agg.mean_regret /= static_cast<double>(agg.settings_counted);
    if (sp_n > 0) agg.mean_spearman = sp_sum / static_cast<double>(sp_n);
    out.push_back(agg);
  }
  return out;
}

const ContinuationReport* StudyTable::find(const std::string& seed_label, int64_t growth_step,
                                           RegimeKind regime, int64_t horizon) const {
  for (const auto& r : reports) {
    if (r.setting.seed_label == seed_label && r.setting.growth_step == growth_step &&
        r.setting.regime == regime && r.setting.horizon == horizon)
      return &r;
  }
  return nullptr;
}

std::vector<SettingSelectors> StudyTable::selectors_per_setting() const {
  std::vector<SettingSelectors> out;
  for (const auto& r : reports) out.push_back({r.setting, evaluate_selectors(r)});
  return out;
}

std::vector<MiniLagRow> StudyTable::minilag_rows() const {
  int64_t min_h = 0, max_h = 0;
  bool first = true;
  for (const auto& r : reports) {
    if (first) {
      min_h = max_h = r.setting.horizon;
      first = false;
    }
    min_h = std::min(min_h, r.setting.horizon);
    max_h = std::max(max_h, r.setting.horizon);
  }
  std::vector<MiniLagRow> rows;
  if (min_h == max_h) return rows;
  for (const auto& target : reports) {
    if (target.setting.horizon != max_h) continue;
    const ContinuationReport* probe =
        find(target.setting.seed_label, target.setting.growth_step, target.setting.regime, min_h);
    if (probe == nullptr) continue;
    rows.push_back(minilag_baselines(*probe, target));
  }
  return rows;
}

std::vector<ClaimAuditRow> claim_audit(const StudyTable& study) {
  int64_t min_h = 0, max_h = 0;
  bool first = true;
  for (const auto& r : study.reports) {
    if (first) {
      min_h = max_h = r.setting.horizon;
      first = false;
    }
    min_h = std::min(min_h, r.setting.horizon);
    max_h = std::max(max_h, r.setting.horizon);
  }

  auto winner_is = [](const ContinuationReport& r, const std::string& recipe) {
    const std::optional<size_t> w = r.winner();
    return w.has_value() && r.candidates[*w].recipe == recipe;
  };

  std::vector<ClaimAuditRow> rows;
  {
    ClaimAuditRow c;
    c.claim_id = "C1";
    c.statement = "Exact-copy symmetric wins every completed short setting.";
    int64_t n = 0, k = 0;
    for (const auto& r : study.reports) {
      if (r.setting.horizon != min_h || min_h == max_h) continue;
      ++n;
      if (winner_is(r, "exactcopy_symmetric")) ++k;
    }
    c.pass = n > 0 && k == n;
    c.support = std::to_string(k) + "/" + std::to_string(n) + " short settings";
    rows.push_back(c);
  }
  {
    ClaimAuditRow c;
    c.claim_id = "C2";
    c.statement = "Reference-subspace wins every completed deterministic long setting.";
    int64_t n = 0, k = 0;
    for (const auto& r : study.reports) {
      if (r.setting.horizon != max_h || min_h == max_h) continue;
      if (r.setting.regime != RegimeKind::kDeterministic) continue;
      ++n;
      if (winner_is(r, "refsubspace_statecopy")) ++k;
    }
    c.pass = n > 0 && k == n;
    c.support = std::to_string(k) + "/" + std::to_string(n) + " deterministic long settings";
    rows.push_back(c);
  }
  {
    ClaimAuditRow c;
    c.claim_id = "C3";
    c.statement = "Exact-copy symmetric wins every completed stochastic long setting.";
    int64_t n = 0, k = 0;
    for (const auto& r : study.reports) {
      if (r.setting.horizon != max_h || min_h == max_h) continue;
      if (r.setting.regime != RegimeKind::kStochastic) continue;
      ++n;
      if (winner_is(r, "exactcopy_symmetric")) ++k;
    }
    c.pass = n > 0 && k == n;
    c.support = std::to_string(k) + "/" + std::to_string(n) + " stochastic long settings";
    rows.push_back(c);
  }

  const std::vector<SelectorAggregate> aggs = aggregate_selectors(study.selectors_per_setting());
  {
    ClaimAuditRow c;
    c.claim_id = "C4";
    c.statement = "Probe KL is the strongest overall low-cost selector by mean top-1 regret.";
    double probe_kl_mean = 0.0;
    bool probe_kl_seen = false;
    bool lowest = true;
    std::ostringstream support;
    for (const SelectorAggregate& a : aggs) {
      if (a.selector == SelectorKind::kProbeKl && a.settings_counted > 0) {
        probe_kl_mean = a.mean_regret;
        probe_kl_seen = true;
      }
    }
    bool first_out = true;
    for (const SelectorAggregate& a : aggs) {
      if (!first_out) support << ", ";
      first_out = false;
      support << selector_display_name(a.selector) << "=" << fmt4(a.mean_regret);
      if (a.selector != SelectorKind::kProbeKl && a.settings_counted > 0 && probe_kl_seen &&
          a.mean_regret <= probe_kl_mean)
        lowest = false;
    }
    c.pass = probe_kl_seen && lowest;
    c.support = support.str();
    rows.push_back(c);
  }
  {
    ClaimAuditRow c;
    c.claim_id = "C5";
    c.statement = "Probe escape is exact only in deterministic long settings.";
    int64_t det_long_zero = 0, det_long_n = 0, other_zero = 0, other_n = 0;
    for (const auto& set : study.selectors_per_setting()) {
      for (const SelectorResult& r : set.results) {
        if (r.selector != SelectorKind::kProbeEscape || !r.evaluable) continue;
        const bool det_long = set.setting.regime == RegimeKind::kDeterministic &&
                              set.setting.horizon == max_h && min_h != max_h;
        if (det_long) {
          ++det_long_n;
          if (r.regret_best_tie == 0.0) ++det_long_zero;
        } else {
          ++other_n;
          if (r.regret_best_tie == 0.0) ++other_zero;
        }
      }
    }
    c.pass = det_long_n > 0 && det_long_zero == det_long_n && other_zero == 0;
    std::ostringstream support;
    support << "zero-regret escape: " << det_long_zero << "/" << det_long_n
            << " deterministic long, " << other_zero << "/" << other_n << " all other settings";
    c.support = support.str();
    rows.push_back(c);
  }
  return rows;
}

namespace {

std::vector<const ContinuationReport*> sorted_reports(const StudyTable& study) {
  std::vector<const ContinuationReport*> out;
  for (const auto& r : study.reports) out.push_back(&r);
  std::sort(out.begin(), out.end(), [](const ContinuationReport* a, const ContinuationReport* b) {
    const Setting& x = a->setting;
    const Setting& y = b->setting;
    if (x.seed_label != y.seed_label) return x.seed_label < y.seed_label;
    if (x.growth_step != y.growth_step) return x.growth_step < y.growth_step;
    if (x.horizon != y.horizon) return x.horizon < y.horizon;
    return static_cast<int>(x.regime) < static_cast<int>(y.regime);
  });
  return out;
}

std::string winner_name(const ContinuationReport& r) {
  const std::optional<size_t> w = r.winner();
  return w.has_value() ? r.candidates[*w].recipe : std::string("n/a");
}

}  // namespace

std::vector<std::string> emit_tables(const StudyTable& study, const std::string& out_dir) {
  fs::create_directories(fs::path(out_dir) / "tables");
  fs::create_directories(fs::path(out_dir) / "figures");
  std::vector<std::string> written;
  const std::vector<const ContinuationReport*> reports = sorted_reports(study);
  const std::vector<SettingSelectors> selectors = study.selectors_per_setting();

  auto emit = [&](const std::string& rel, const std::string& content) {
    const std::string path = (fs::path(out_dir) / rel).string();
    atomic_write(path, content);
    written.push_back(path);
  };

  {
    std::ostringstream os;
    os << "# Regime summary\n\n";
    os << "| Setting | Winner | Exact-copy AUC | Ref-subspace AUC | Delta AUC (ref - exact) | "
          "Mean delta / step |\n";
    os << "|---|---|---|---|---|---|\n";
    for (const ContinuationReport* r : reports) {
      const CandidateReport* e = r->find("exactcopy_symmetric");
      const CandidateReport* f = r->find("refsubspace_statecopy");
      os << "| " << r->setting.label() << " | " << winner_name(*r) << " | ";
      if (e != nullptr && e->valid) {
        os << fmt4(e->auc_value);
      } else {
        os << "n/a";
      }
      os << " | ";
      if (f != nullptr && f->valid) {
        os << fmt4(f->auc_value);
      } else {
        os << "n/a";
      }
      os << " | ";
      if (e != nullptr && f != nullptr && e->valid && f->valid) {
        const double delta = f->auc_value - e->auc_value;
        os << fmt4(delta) << " | " << fmt4(delta / static_cast<double>(r->setting.horizon));
      } else {
        os << "n/a | n/a";
      }
      os << " |\n";
    }
    emit("tables/regime_summary.md", os.str());
  }

  {
    std::ostringstream os;
    os << "# Selector top-1 regret (best-tie)\n\n";
    os << "| Setting |";
    for (SelectorKind s : all_selectors()) os << " " << selector_display_name(s) << " |";
    os << "\n|---|";
    for (size_t i = 0; i < all_selectors().size(); ++i) os << "---|";
    os << "\n";
    for (const ContinuationReport* r : reports) {
      os << "| " << r->setting.label() << " |";
      const std::vector<SelectorResult> res = evaluate_selectors(*r);
      for (const SelectorResult& sel : res) {
        if (sel.evaluable) {
          os << " " << fmt4(sel.regret_best_tie) << " |";
        } else {
          os << " n/a |";
        }
      }
      os << "\n";
    }
    emit("tables/selector_regret.md", os.str());
  }

  {
    std::ostringstream os;
    os << "# Short-run baselines for long targets\n\n";
    os << "| Target | Short AUC pick | Regret @ target | Short final pick | Regret @ target | "
          "Spearman |\n";
    os << "|---|---|---|---|---|---|\n";
    for (const MiniLagRow& row : study.minilag_rows()) {
      os << "| " << row.target.label() << " | " << row.auc_pick << " | "
         << fmt4(row.auc_pick_regret) << " | " << row.final_pick << " | "
         << fmt4(row.final_pick_regret) << " | "
         << (row.spearman_16_vs_128.has_value() ? fmt4(*row.spearman_16_vs_128) : "n/a")
         << " |\n";
    }
    emit("tables/minilag.md", os.str());
  }

  {
    std::ostringstream os;
    os << "# Evidence matrix\n\n";
    os << "| Setting | Regime | Horizon | Winner | Delta AUC | Best selector | Best regret |\n";
    os << "|---|---|---|---|---|---|---|\n";
    for (const ContinuationReport* r : reports) {
      const CandidateReport* e = r->find("exactcopy_symmetric");
      const CandidateReport* f = r->find("refsubspace_statecopy");
      os << "| " << r->setting.label() << " | " << regime_name(r->setting.regime) << " | "
         << r->setting.horizon << " | " << winner_name(*r) << " | ";
      if (e != nullptr && f != nullptr && e->valid && f->valid) {
        os << fmt4(f->auc_value - e->auc_value);
      } else {
        os << "n/a";
      }
      const std::vector<SelectorResult> res = evaluate_selectors(*r);
      double best = 0.0;
      bool seen = false;
      for (const SelectorResult& sel : res) {
        if (!sel.evaluable) continue;
        if (!seen || sel.regret_best_tie < best) {
          best = sel.regret_best_tie;
          seen = true;
        }
      }
      std::string names;
      for (const SelectorResult& sel : res) {
        if (sel.evaluable && sel.regret_best_tie == best && seen)
          names += (names.empty() ? "" : ", ") + std::string(selector_display_name(sel.selector));
      }
      os << " | " << (seen ? names : "n/a") << " | " << (seen ? fmt4(best) : "n/a") << " |\n";
    }
    emit("tables/evidence_matrix.md", os.str());
  }

  {
    const std::vector<SelectorAggregate> aggs = aggregate_selectors(selectors);
    std::ostringstream os;
    os << "# Aggregate selector statistics\n\n";
    os << "| Selector | Mean regret | Max regret | Zero-regret settings | Mean Spearman to "
          "utility |\n";
    os << "|---|---|---|---|---|\n";
    for (const SelectorAggregate& a : aggs) {
      os << "| " << selector_display_name(a.selector) << " | " << fmt4(a.mean_regret) << " | "
         << fmt4(a.max_regret) << " | " << a.zero_regret_settings << " | "
         << (a.mean_spearman.has_value() ? fmt4(*a.mean_spearman) : "n/a") << " |\n";
    }
    emit("tables/aggregate_selectors.md", os.str());
  }

  {
    std::ostringstream os;
    os << "# Claim audit\n\n";
    os << "| Claim ID | Audited statement | Status | Quantitative support |\n";
    os << "|---|---|---|---|\n";
    for (const ClaimAuditRow& c : claim_audit(study)) {
      os << "| " << c.claim_id << " | " << c.statement << " | " << (c.pass ? "pass" : "fail")
         << " | " << c.support << " |\n";
    }
    emit("tables/claim_audit.md", os.str());
  }

  {
    std::ostringstream os;
    os << "setting,regime,horizon,auc_gap_ref_minus_exact\n";
    for (const ContinuationReport* r : reports) {
      const CandidateReport* e = r->find("exactcopy_symmetric");
      const CandidateReport* f = r->find("refsubspace_statecopy");
      if (e == nullptr || f == nullptr || !e->valid || !f->valid) continue;
      os << r->setting.dir_name() << "," << regime_name(r->setting.regime) << ","
         << r->setting.horizon << "," << format_shortest(f->auc_value - e->auc_value) << "\n";
    }
    emit("figures/figure1.csv", os.str());
  }

  {
    std::ostringstream os;
    os << "setting,selector,regret_best_tie\n";
    for (const SettingSelectors& set : selectors) {
      for (const SelectorResult& sel : set.results) {
        if (!sel.evaluable) continue;
        os << set.setting.dir_name() << "," << selector_key(sel.selector) << ","
           << format_shortest(sel.regret_best_tie) << "\n";
      }
    }
    emit("figures/figure2.csv", os.str());
  }

  return written;
}

namespace {

json zero_step_to_json(const ZeroStepReport& z) {
  json j{{"val_loss", z.val_loss}, {"kl0", z.kl0}, {"rms_drift", z.rms_drift}};
  if (z.escape.has_value()) {
    j["escape"] = *z.escape;
  } else {
    j["escape"] = nullptr;
  }
  return j;
}

ZeroStepReport zero_step_from_json(const json& j) {
  ZeroStepReport z;
  z.val_loss = j.at("val_loss").get<double>();
  z.kl0 = j.at("kl0").get<double>();
  z.rms_drift = j.at("rms_drift").get<double>();
  if (!j.at("escape").is_null()) z.escape = j.at("escape").get<double>();
  return z;
}

}  // namespace

void write_report(const ContinuationReport& report, const std::string& dir) {
  fs::create_directories(dir);
  std::ostringstream os;
  {
    json j{{"type", "setting"},
           {"seed_label", report.setting.seed_label},
           {"growth_step", report.setting.growth_step},
           {"regime", regime_name(report.setting.regime)},
           {"horizon", report.setting.horizon},
           {"provenance", report.provenance}};
    os << j.dump() << "\n";
  }
  for (const CandidateReport& c : report.candidates) {
    json traj = json::array();
    for (const TrajPoint& p : c.trajectory) traj.push_back({p.step, p.loss});
    json j{{"type", "candidate"}, {"recipe", c.recipe},         {"valid", c.valid},
           {"failure", c.failure}, {"zero_step", zero_step_to_json(c.zero_step)},
           {"trajectory", traj},   {"auc", c.auc_value}};
    if (c.probe.has_value()) {
      json p{{"mean_kl", c.probe->mean_kl}, {"mean_rms_drift", c.probe->mean_rms_drift}};
      if (c.probe->mean_escape.has_value()) {
        p["mean_escape"] = *c.probe->mean_escape;
      } else {
        p["mean_escape"] = nullptr;
      }
      j["probe"] = p;
    } else {
      j["probe"] = nullptr;
    }
    os << j.dump() << "\n";
  }
  atomic_write((fs::path(dir) / "report.jsonl").string(), os.str());
}

ContinuationReport read_report(const std::string& dir) {
  const std::string path = (fs::path(dir) / "report.jsonl").string();
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open report: " + path);
  ContinuationReport report;
  std::string line;
  bool have_setting = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw LoadError("bad report record in " + path + ": " + e.what());
    }
    const std::string type = j.at("type").get<std::string>();
    if (type == "setting") {
      report.setting.seed_label = j.at("seed_label").get<std::string>();
      report.setting.growth_step = j.at("growth_step").get<int64_t>();
      report.setting.regime = regime_from_name(j.at("regime").get<std::string>());
      report.setting.horizon = j.at("horizon").get<int64_t>();
      report.provenance = j.at("provenance").get<std::string>();
      have_setting = true;
    } else if (type == "candidate") {
      CandidateReport c;
      c.recipe = j.at("recipe").get<std::string>();
      c.valid = j.at("valid").get<bool>();
      c.failure = j.at("failure").get<std::string>();
      c.zero_step = zero_step_from_json(j.at("zero_step"));
      for (const json& p : j.at("trajectory"))
        c.trajectory.push_back({p.at(0).get<int64_t>(), p.at(1).get<double>()});
      c.auc_value = j.at("auc").get<double>();
      if (!j.at("probe").is_null()) {
        ProbeAggregates agg;
        agg.mean_kl = j.at("probe").at("mean_kl").get<double>();
        agg.mean_rms_drift = j.at("probe").at("mean_rms_drift").get<double>();
        if (!j.at("probe").at("mean_escape").is_null())
          agg.mean_escape = j.at("probe").at("mean_escape").get<double>();
        c.probe = agg;
      }
      report.candidates.push_back(std::move(c));
    } else {
      throw LoadError("unknown report record type '" + type + "' in " + path);
    }
  }
  if (!have_setting) throw LoadError("report missing setting record: " + path);
  return report;
}

StudyTable read_study(const std::string& settings_root) {
  StudyTable study;
  std::vector<std::string> dirs;
  for (const auto& entry : fs::directory_iterator(settings_root)) {
    if (entry.is_directory() && fs::exists(entry.path() / "report.jsonl"))
      dirs.push_back(entry.path().string());
  }
  std::sort(dirs.begin(), dirs.end());
  for (const std::string& d : dirs) study.reports.push_back(read_report(d));
  return study;
}

}  // namespace widthlab
