#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "widthlab/model.hpp"
#include "widthlab/study.hpp"
#include "widthlab/train_state.hpp"
#include "widthlab/widen.hpp"

namespace widthlab {

// Flat `key = value` configuration with section-prefixed keys (model.*,
// optim.*, ...). '#' starts a comment. Every key must be consumed by a
// getter; leftovers are rejected by name. The resolved text records the
// effective value of every key the program looked at, defaults included.
class KvConfig {
 public:
  KvConfig() = default;
  static KvConfig from_file(const std::string& path);
  static KvConfig from_string(const std::string& text);

  void set(const std::string& key, const std::string& value);

  std::string get_str(const std::string& key, const std::string& def);
  int64_t get_int(const std::string& key, int64_t def);
  uint64_t get_u64(const std::string& key, uint64_t def);
  double get_double(const std::string& key, double def);
  bool get_bool(const std::string& key, bool def);
  std::vector<std::string> get_list(const std::string& key, const std::string& def);
  std::vector<int64_t> get_int_list(const std::string& key, const std::string& def);

  // Throws ConfigError naming the first key nobody consumed.
  void reject_unknown() const;

  // Canonical `key = value` lines, sorted by key.
  std::string resolved_text() const;

 private:
  std::string raw(const std::string& key, const std::string& def);

  std::map<std::string, std::string> values_;
  std::map<std::string, bool> consumed_;
  std::map<std::string, std::string> resolved_;
};

struct DataConfig {
  std::string source = "synthetic";  // synthetic | text | tokens
  std::string path;
  uint64_t seed = 1234;
  int64_t n_docs = 4000;
  int sub_vocab = 64;
  int grammar_support = 8;
  int min_doc_len = 64;
  int max_doc_len = 192;
  double val_fraction = 0.1;
};

struct TrainConfig {
  int64_t steps = 400;
  int64_t micro_batch = 4;
  int64_t accumulation = 2;
  int64_t eval_cadence = 50;
  int64_t n_val_batches = 8;
};

struct StudyConfig {
  std::vector<int64_t> seeds = {0};
  std::vector<int64_t> growth_steps = {400};
  int64_t width_multiplier = 2;
  std::vector<Recipe> pool;
  std::vector<int64_t> horizons = {16, 128};
  std::vector<RegimeKind> regimes;
  int64_t probe_eval_cadence = 1;
  int64_t long_eval_cadence = 4;
  int64_t diag_batches = 8;
  uint64_t continuation_seed = 99;
  double dropout_override = 0.1;
  double perturb_sigma = 1e-3;
};

struct RunConfig {
  ModelConfig model;
  AdamWParams optim;
  SchedState sched;
  DataConfig data;
  TrainConfig train;
  StudyConfig study;
  std::string resolved;  // canonical text of every effective key

  static RunConfig from_kv(KvConfig kv);
  static RunConfig from_file(const std::string& path);
};

}  // namespace widthlab
