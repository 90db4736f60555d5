#include "widthlab/runner.hpp"

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <thread>

#include "widthlab/errors.hpp"
#include "widthlab/metrics.hpp"
#include "widthlab/version.hpp"

namespace widthlab {

namespace fs = std::filesystem;

int worker_threads() {
  if (const char* env = std::getenv("WIDTHLAB_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

BuiltData build_data(const DataConfig& data, const ModelConfig& model) {
  const int64_t row_length = model.context_length + 1;
  std::vector<std::vector<TokenId>> docs;
  std::ostringstream prov;
  if (data.source == "synthetic") {
    const MarkovGrammar grammar = make_default_grammar(data.sub_vocab, data.seed,
                                                       data.grammar_support, data.min_doc_len,
                                                       data.max_doc_len);
    docs = gen_synthetic_corpus(data.seed, data.n_docs, grammar);
    prov << "synthetic order-2 markov, sub_vocab=" << data.sub_vocab << ", seed=" << data.seed
         << ", n_docs=" << data.n_docs;
  } else if (data.source == "text") {
    docs = load_text_corpus(data.path);
    prov << "text corpus " << data.path;
  } else if (data.source == "tokens") {
    auto [ids, vocab] = load_token_file(data.path);
    if (static_cast<int64_t>(vocab) > model.vocab_size)
      throw ConfigError("token file vocabulary exceeds the model's");
    // EOS-delimited documents inside one stream.
    std::vector<TokenId> doc;
    for (TokenId id : ids) {
      if (id == kEosId) {
        docs.push_back(doc);
        doc.clear();
      } else {
        doc.push_back(id);
      }
    }
    if (!doc.empty()) docs.push_back(doc);
    prov << "token file " << data.path;
  } else {
    throw ConfigError("unknown data.source '" + data.source + "'");
  }

  PackedDataset all = pack_rows(docs, row_length, kBosId, kEosId, model.vocab_size);
  if (all.n_rows() < 4) throw ConfigError("corpus too small after packing");
  const int64_t val_rows =
      std::max<int64_t>(1, static_cast<int64_t>(static_cast<double>(all.n_rows()) * data.val_fraction));
  BuiltData out;
  out.val = all.slice(0, val_rows, "val split");
  out.train = all.slice(val_rows, all.n_rows(), "train split");
  out.provenance = prov.str() + "; " + all.provenance + "; val_rows=" + std::to_string(val_rows);
  out.train.provenance = out.provenance + " (train)";
  out.val.provenance = out.provenance + " (val)";
  return out;
}

ParentRun train_parent(const RunConfig& cfg, int64_t seed_value, const BuiltData& data,
                       std::ostream& log) {
  ParentRun run;
  TrainState state = make_train_state(cfg.model, static_cast<uint64_t>(seed_value), cfg.optim,
                                      cfg.sched);
  {
    std::ostringstream prov;
    prov << "parent seed=" << seed_value << "; " << data.provenance;
    state.provenance = prov.str();
  }

  BatchPlan plan;
  plan.order_policy = OrderPolicy::kFixed;
  plan.seed = mix64(static_cast<uint64_t>(seed_value), 0xB41C4ull);
  plan.micro_batch = cfg.train.micro_batch;
  plan.accumulation = cfg.train.accumulation;

  EvalSpec eval;
  eval.cadence = cfg.train.eval_cadence;
  eval.n_val_batches = cfg.train.n_val_batches;
  eval.micro_batch = cfg.train.micro_batch;
  eval.val = &data.val;

  std::vector<int64_t> stops = cfg.study.growth_steps;
  stops.push_back(cfg.train.steps);
  std::sort(stops.begin(), stops.end());
  stops.erase(std::unique(stops.begin(), stops.end()), stops.end());

  int64_t done = 0;
  for (int64_t stop : stops) {
    if (stop < done) throw ConfigError("growth steps must be non-negative and ordered");
    if (stop > done) {
      RunLog seg = train(state, data.train, plan, done, stop - done, eval, std::nullopt, nullptr);
      for (const auto& s : seg.steps) run.log.steps.push_back({s.step + done, s.train_loss, s.lr});
      for (const auto& e : seg.evals) {
        if (e.step == 0 && done > 0) continue;  // interior segment re-evaluates its start
        run.log.evals.push_back({e.step + done, e.val_loss});
      }
      done = stop;
    }
    for (int64_t g : cfg.study.growth_steps) {
      if (g == stop) run.snapshots.emplace_back(g, state);
    }
    log << "[parent " << seed_value << "] step " << done << ", val "
        << (run.log.evals.empty() ? 0.0 : run.log.evals.back().val_loss) << "\n";
  }
  run.final_state = std::move(state);
  return run;
}

DiagContext make_diag_context(const TrainState& parent, const BuiltData& data,
                              const RunConfig& cfg, uint64_t diag_seed) {
  DiagContext ctx;
  ctx.val_batches = make_val_batches(data.val, cfg.train.n_val_batches, cfg.train.micro_batch);
  Rng rng(mix64(diag_seed, 0xD1A6ull));
  std::ostringstream prov;
  prov << "diag_batches=" << cfg.study.diag_batches << " seed=" << diag_seed << " rows=[";
  for (int64_t b = 0; b < cfg.study.diag_batches; ++b) {
    std::vector<int64_t> rows(static_cast<size_t>(cfg.train.micro_batch));
    for (auto& r : rows) {
      r = static_cast<int64_t>(rng.below(static_cast<uint64_t>(data.val.n_rows())));
      prov << r << " ";
    }
    ctx.diag_batches.push_back(make_batch(data.val, rows));
  }
  prov << "]";
  ctx.provenance = prov.str();
  for (const Batch& b : ctx.diag_batches)
    ctx.parent_diag_traces.push_back(forward(parent.params, parent.config, b.inputs,
                                             RunMode::kEval, std::nullopt, nullptr));
  return ctx;
}

CandidateReport run_candidate(const CandidateState& candidate, const Setting& setting,
                              const BuiltData& data, const RunConfig& cfg,
                              const DiagContext& diag, bool collect_probe) {
  CandidateReport report;
  report.recipe = candidate.recipe;
  TrainState state = candidate.state;

  try {
    report.zero_step.val_loss = eval_loss(state.params, state.config, diag.val_batches);
    report.zero_step.kl0 = kl_zero_vs(diag.parent_diag_traces, state, diag.diag_batches);
    report.zero_step.rms_drift = rms_drift_vs(diag.parent_diag_traces, state, diag.diag_batches);
    report.zero_step.escape = escape(state, diag.diag_batches);

    // Bind an unbound rewarmup schedule to this continuation's horizon.
    if (state.sched.kind == SchedKind::kFreshCosine && state.sched.total_steps == 0)
      state.sched.total_steps = setting.horizon;

    // One shared continuation stream so every candidate sees the same data
    // order and, under dropout, the same mask sequence.
    state.rng = Rng(mix64(cfg.study.continuation_seed, 0xC0 + static_cast<uint64_t>(setting.horizon)));

    BatchPlan plan;
    plan.order_policy = setting.regime == RegimeKind::kDeterministic ? OrderPolicy::kFixed
                                                                     : OrderPolicy::kShuffled;
    plan.seed = cfg.study.continuation_seed;
    plan.micro_batch = cfg.train.micro_batch;
    plan.accumulation = cfg.train.accumulation;

    EvalSpec eval;
    eval.cadence = setting.horizon == cfg.study.horizons.front() ? cfg.study.probe_eval_cadence
                                                                 : cfg.study.long_eval_cadence;
    eval.n_val_batches = cfg.train.n_val_batches;
    eval.micro_batch = cfg.train.micro_batch;
    eval.val = &data.val;

    const std::optional<double> dropout =
        setting.regime == RegimeKind::kStochastic ? std::optional<double>(cfg.study.dropout_override)
                                                  : std::nullopt;

    std::vector<ProbeEntry> probe_log;
    StepObserver observer;
    if (collect_probe) {
      observer.before_step = [&](const TrainState& st, const ParamSet<float>& grads, int64_t) {
        ProbeEntry e;
        e.escape = escape_from_grads(st, grads);
        probe_log.push_back(e);
      };
      observer.after_step = [&](const TrainState& st, int64_t step) {
        ProbeEntry& e = probe_log[static_cast<size_t>(step - 1)];
        e.kl = kl_zero_vs(diag.parent_diag_traces, st, diag.diag_batches);
        e.rms_drift = rms_drift_vs(diag.parent_diag_traces, st, diag.diag_batches);
      };
    }

    const RunLog log = train(state, data.train, plan, setting.growth_step, setting.horizon, eval,
                             dropout, collect_probe ? &observer : nullptr);
    for (const auto& e : log.evals) report.trajectory.push_back({e.step, e.val_loss});
    report.auc_value = auc(report.trajectory);
    if (collect_probe) report.probe = probe_aggregates(probe_log);
  } catch (const RunAbortError& e) {
    report.valid = false;
    report.failure = e.what();
  }
  return report;
}

ContinuationReport run_setting(const std::vector<CandidateState>& pool, const Setting& setting,
                               const BuiltData& data, const RunConfig& cfg,
                               const DiagContext& diag, bool collect_probe) {
  ContinuationReport report;
  report.setting = setting;
  report.candidates.resize(pool.size());
  std::ostringstream prov;
  prov << "eval_cadence="
       << (setting.horizon == cfg.study.horizons.front() ? cfg.study.probe_eval_cadence
                                                         : cfg.study.long_eval_cadence)
       << "; continuation_seed=" << cfg.study.continuation_seed
       << "; continuation_data=resume_parent_order; " << diag.provenance;
  report.provenance = prov.str();

  const int workers = std::min<int>(worker_threads(), static_cast<int>(pool.size()));
  std::atomic<size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= pool.size()) return;
      report.candidates[i] = run_candidate(pool[i], setting, data, cfg, diag, collect_probe);
    }
  };
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (int w = 0; w < workers; ++w) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  return report;
}

std::vector<CandidateState> build_pool(const TrainState& parent, const RunConfig& cfg,
                                       int64_t seed_value) {
  std::vector<CandidateState> pool;
  pool.reserve(cfg.study.pool.size());
  for (size_t i = 0; i < cfg.study.pool.size(); ++i) {
    const uint64_t seed = mix64(static_cast<uint64_t>(seed_value), 0xCA0D + i);
    pool.push_back(build_candidate(parent, cfg.study.pool[i], cfg.study.width_multiplier, seed,
                                   cfg.study.perturb_sigma));
  }
  return pool;
}

void write_provenance(const std::string& out_dir, const std::string& resolved_config) {
  fs::create_directories(out_dir);
  {
    std::ofstream out(fs::path(out_dir) / "config.resolved");
    out << resolved_config;
  }
  {
    std::ofstream out(fs::path(out_dir) / "VERSION");
    out << "widthlab " << kToolVersion << "\n";
  }
}

StudyRunResult run_study(const RunConfig& cfg, const std::string& out_dir, std::ostream& log) {
  write_provenance(out_dir, cfg.resolved);
  const BuiltData data = build_data(cfg.data, cfg.model);
  log << "corpus: " << data.train.n_rows() << " train rows, " << data.val.n_rows()
      << " val rows\n";

  StudyRunResult result;
  for (int64_t seed_value : cfg.study.seeds) {
    const std::string label = "S" + std::to_string(seed_value);
    ParentRun parent_run = train_parent(cfg, seed_value, data, log);

    const fs::path parent_dir = fs::path(out_dir) / "parent" / label;
    fs::create_directories(parent_dir);
    {
      std::ostringstream os;
      os << "step,train_loss,lr\n";
      for (const auto& s : parent_run.log.steps)
        os << s.step << "," << s.train_loss << "," << s.lr << "\n";
      std::ofstream(parent_dir / "runlog.csv") << os.str();
      std::ostringstream ev;
      ev << "step,val_loss\n";
      for (const auto& e : parent_run.log.evals) ev << e.step << "," << e.val_loss << "\n";
      std::ofstream(parent_dir / "evals.csv") << ev.str();
    }

    for (const auto& [growth, parent_state] : parent_run.snapshots) {
      save_checkpoint_file(parent_state,
                           (parent_dir / ("parent_g" + std::to_string(growth) + ".ck")).string());
      const std::vector<CandidateState> pool = build_pool(parent_state, cfg, seed_value);
      const DiagContext diag = make_diag_context(
          parent_state, data, cfg, mix64(static_cast<uint64_t>(seed_value), static_cast<uint64_t>(growth)));

      for (RegimeKind regime : cfg.study.regimes) {
        const ContinuationReport* probe_report = nullptr;
        std::vector<ContinuationReport> local;
        local.reserve(cfg.study.horizons.size());
        for (int64_t horizon : cfg.study.horizons) {  // ascending: probes first
          Setting setting{label, growth, regime, horizon};
          const bool is_probe = horizon == cfg.study.horizons.front();
          log << "setting " << setting.label() << " ...\n";
          ContinuationReport report = run_setting(pool, setting, data, cfg, diag, is_probe);
          if (!is_probe && probe_report != nullptr) {
            for (CandidateReport& c : report.candidates) {
              const CandidateReport* p = probe_report->find(c.recipe);
              if (p != nullptr && p->valid) c.probe = p->probe;
            }
          }
          local.push_back(std::move(report));
          if (is_probe) probe_report = &local.back();
        }
        for (ContinuationReport& r : local) {
          write_report(r, (fs::path(out_dir) / "settings" / r.setting.dir_name()).string());
          result.table.reports.push_back(std::move(r));
        }
      }
    }
  }

  result.written_files = emit_tables(result.table, out_dir);
  return result;
}

}  // namespace widthlab
