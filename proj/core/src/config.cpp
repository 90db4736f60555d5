#include "widthlab/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "widthlab/errors.hpp"

namespace widthlab {

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

KvConfig KvConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_string(ss.str());
}

KvConfig KvConfig::from_string(const std::string& text) {
  KvConfig kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    kv.set(key, value);
  }
  return kv;
}

void KvConfig::set(const std::string& key, const std::string& value) {
  values_[key] = value;
  consumed_[key] = false;
}

std::string KvConfig::raw(const std::string& key, const std::string& def) {
  auto it = values_.find(key);
  std::string v = def;
  if (it != values_.end()) {
    v = it->second;
    consumed_[key] = true;
  }
  resolved_[key] = v;
  return v;
}

std::string KvConfig::get_str(const std::string& key, const std::string& def) {
  return raw(key, def);
}

int64_t KvConfig::get_int(const std::string& key, int64_t def) {
  const std::string v = raw(key, std::to_string(def));
  try {
    size_t pos = 0;
    const int64_t out = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not an integer");
  }
}

uint64_t KvConfig::get_u64(const std::string& key, uint64_t def) {
  const std::string v = raw(key, std::to_string(def));
  try {
    size_t pos = 0;
    const uint64_t out = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not an unsigned integer");
  }
}

double KvConfig::get_double(const std::string& key, double def) {
  std::ostringstream d;
  d.precision(17);
  d << def;
  const std::string v = raw(key, d.str());
  try {
    size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not a number");
  }
}

bool KvConfig::get_bool(const std::string& key, bool def) {
  const std::string v = raw(key, def ? "true" : "false");
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': '" + v + "' is not a boolean");
}

std::vector<std::string> KvConfig::get_list(const std::string& key, const std::string& def) {
  const std::string v = raw(key, def);
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(v);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<int64_t> KvConfig::get_int_list(const std::string& key, const std::string& def) {
  std::vector<int64_t> out;
  for (const std::string& s : get_list(key, def)) {
    try {
      out.push_back(std::stoll(s));
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': '" + s + "' is not an integer");
    }
  }
  return out;
}

void KvConfig::reject_unknown() const {
  for (const auto& [key, used] : consumed_) {
    if (!used) throw ConfigError("unknown config key '" + key + "'");
  }
}

std::string KvConfig::resolved_text() const {
  std::ostringstream os;
  for (const auto& [key, value] : resolved_) os << key << " = " << value << "\n";
  return os.str();
}

RunConfig RunConfig::from_kv(KvConfig kv) {
  RunConfig cfg;
  cfg.model.n_layers = kv.get_int("model.n_layers", 2);
  cfg.model.d_model = kv.get_int("model.d_model", 64);
  cfg.model.n_heads = kv.get_int("model.n_heads", 2);
  cfg.model.d_head = kv.get_int("model.d_head", 32);
  cfg.model.context_length = kv.get_int("model.context_length", 64);
  cfg.model.vocab_size = kv.get_int("model.vocab_size", kByteVocabSize);
  cfg.model.mlp_multiplier = kv.get_double("model.mlp_multiplier", 4.0);
  cfg.model.dropout_p = kv.get_double("model.dropout_p", 0.0);
  cfg.model.tied_head = kv.get_bool("model.tied_head", true);
  cfg.model.validate();

  cfg.optim.beta1 = kv.get_double("optim.beta1", 0.9);
  cfg.optim.beta2 = kv.get_double("optim.beta2", 0.95);
  cfg.optim.eps = kv.get_double("optim.eps", 1e-8);
  cfg.optim.weight_decay = kv.get_double("optim.weight_decay", 0.1);
  cfg.optim.grad_clip = kv.get_double("optim.grad_clip", 1.0);

  const std::string sched_kind = kv.get_str("sched.kind", "warmup_cosine");
  if (sched_kind == "warmup_cosine") {
    cfg.sched.kind = SchedKind::kWarmupCosine;
  } else if (sched_kind == "constant") {
    cfg.sched.kind = SchedKind::kConstant;
  } else if (sched_kind == "fresh_cosine") {
    cfg.sched.kind = SchedKind::kFreshCosine;
  } else {
    throw ConfigError("config key 'sched.kind': unknown kind '" + sched_kind + "'");
  }
  cfg.sched.base_lr = kv.get_double("optim.lr", 3e-4);
  cfg.sched.min_lr = kv.get_double("optim.min_lr", 3e-5);
  cfg.sched.warmup_steps = kv.get_int("sched.warmup_steps", 40);
  cfg.sched.total_steps = kv.get_int("sched.total_steps", 800);
  cfg.sched.offset = 0;
  if (cfg.sched.min_lr > cfg.sched.base_lr)
    throw ConfigError("config: optim.min_lr must not exceed optim.lr");
  if (cfg.sched.warmup_steps > cfg.sched.total_steps)
    throw ConfigError("config: sched.warmup_steps must not exceed sched.total_steps");

  cfg.data.source = kv.get_str("data.source", "synthetic");
  if (cfg.data.source != "synthetic" && cfg.data.source != "text" && cfg.data.source != "tokens")
    throw ConfigError("config key 'data.source': must be synthetic, text, or tokens");
  cfg.data.path = kv.get_str("data.path", "");
  cfg.data.seed = kv.get_u64("data.seed", 1234);
  cfg.data.n_docs = kv.get_int("data.n_docs", 4000);
  cfg.data.sub_vocab = static_cast<int>(kv.get_int("data.sub_vocab", 64));
  cfg.data.grammar_support = static_cast<int>(kv.get_int("data.grammar_support", 8));
  cfg.data.min_doc_len = static_cast<int>(kv.get_int("data.min_doc_len", 64));
  cfg.data.max_doc_len = static_cast<int>(kv.get_int("data.max_doc_len", 192));
  cfg.data.val_fraction = kv.get_double("data.val_fraction", 0.1);
  if (cfg.data.val_fraction <= 0.0 || cfg.data.val_fraction >= 1.0)
    throw ConfigError("config key 'data.val_fraction': must lie in (0, 1)");

  cfg.train.steps = kv.get_int("train.steps", 400);
  cfg.train.micro_batch = kv.get_int("train.micro_batch", 4);
  cfg.train.accumulation = kv.get_int("train.accumulation", 2);
  cfg.train.eval_cadence = kv.get_int("train.eval_cadence", 50);
  cfg.train.n_val_batches = kv.get_int("train.n_val_batches", 8);

  cfg.study.seeds = kv.get_int_list("study.seeds", "0");
  cfg.study.growth_steps = kv.get_int_list("study.growth_steps", "400");
  cfg.study.width_multiplier = kv.get_int("study.width_multiplier", 2);
  const std::string default_pool =
      "scratch_large,exactcopy_symmetric,exactcopy_perturb_symmetric,exactcopy_asymreset,"
      "exactcopy_asymreset_rewarmup,refsubspace_statecopy";
  cfg.study.pool.clear();
  for (const std::string& name : kv.get_list("study.pool", default_pool))
    cfg.study.pool.push_back(recipe_from_name(name));
  cfg.study.horizons = kv.get_int_list("study.horizons", "16,128");
  cfg.study.regimes.clear();
  for (const std::string& name : kv.get_list("study.regimes", "deterministic,stochastic"))
    cfg.study.regimes.push_back(regime_from_name(name));
  cfg.study.probe_eval_cadence = kv.get_int("study.probe_eval_cadence", 1);
  cfg.study.long_eval_cadence = kv.get_int("study.long_eval_cadence", 4);
  cfg.study.diag_batches = kv.get_int("study.diag_batches", 8);
  cfg.study.continuation_seed = kv.get_u64("study.continuation_seed", 99);
  cfg.study.dropout_override = kv.get_double("study.dropout_override", 0.1);
  cfg.study.perturb_sigma = kv.get_double("study.perturb_sigma", 1e-3);
  if (cfg.study.horizons.empty()) throw ConfigError("config: study.horizons must be non-empty");
  if (cfg.study.pool.empty()) throw ConfigError("config: study.pool must be non-empty");
  std::sort(cfg.study.horizons.begin(), cfg.study.horizons.end());

  kv.reject_unknown();
  cfg.resolved = kv.resolved_text();
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  return from_kv(KvConfig::from_file(path));
}

}  // namespace widthlab
