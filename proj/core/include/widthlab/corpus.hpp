#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "widthlab/tensor.hpp"

namespace widthlab {

using TokenId = int32_t;

// Byte-level tokenizer: ids 0..255 are raw bytes, 256/257 are the reserved
// sentinels, so the working vocabulary is always 258.
inline constexpr TokenId kBosId = 256;
inline constexpr TokenId kEosId = 257;
inline constexpr int64_t kByteVocabSize = 258;

// Order-2 Markov generator over a small symbol alphabet mapped into byte
// space. States are (prev2, prev1) symbol pairs; each state owns a
// distribution over next symbols.
struct MarkovGrammar {
  int sub_vocab = 64;          // number of symbols
  TokenId base_token = 32;     // symbol s emits token base_token + s
  int min_doc_len = 64;        // document lengths drawn uniformly in range
  int max_doc_len = 192;
  // Row-major (sub_vocab * sub_vocab) x sub_vocab transition matrix.
  std::vector<double> transition;

  int states() const { return sub_vocab * sub_vocab; }
  const double* row(int state) const { return transition.data() + static_cast<size_t>(state) * sub_vocab; }

  // Throws ConfigError on negative mass or any row not summing to 1 within 1e-12.
  void validate() const;
};

// Deterministic sparse-support grammar: each state gets a small set of
// permitted next symbols with rank-weighted mass. Structured enough that a
// few hundred optimizer steps produce a clearly non-trivial ranking signal.
MarkovGrammar make_default_grammar(int sub_vocab, uint64_t seed, int support = 8,
                                   int min_doc_len = 64, int max_doc_len = 192);

// n_docs documents of symbol tokens (no BOS/EOS inside). Bit-for-bit
// deterministic in (seed, n_docs, grammar).
std::vector<std::vector<TokenId>> gen_synthetic_corpus(uint64_t seed, int64_t n_docs,
                                                       const MarkovGrammar& grammar);

struct PackedDataset {
  std::vector<TokenId> tokens;  // n_rows * row_length, row-major
  int64_t row_length = 0;
  int64_t vocab_size = 0;
  std::string provenance;

  int64_t n_rows() const { return row_length == 0 ? 0 : static_cast<int64_t>(tokens.size()) / row_length; }
  const TokenId* row(int64_t r) const { return tokens.data() + r * row_length; }

  // Row range [begin, end) as an independent dataset; used for train/val splits.
  PackedDataset slice(int64_t begin, int64_t end, const std::string& note) const;
};

// Wrap each document with BOS/EOS, flatten, cut into consecutive
// non-overlapping rows of row_length; a trailing remainder is dropped.
PackedDataset pack_rows(const std::vector<std::vector<TokenId>>& documents, int64_t row_length,
                        TokenId bos_id, TokenId eos_id, int64_t vocab_size);

enum class OrderPolicy { kFixed, kShuffled };

struct BatchPlan {
  OrderPolicy order_policy = OrderPolicy::kFixed;
  uint64_t seed = 0;
  int64_t micro_batch = 1;
  int64_t accumulation = 1;
};

// One micro-batch of aligned next-token pairs. inputs/targets are
// micro_batch x (row_length - 1).
struct Batch {
  Tensor<TokenId> inputs;
  Tensor<TokenId> targets;
};

// Stateful walk over row indices. Fixed policy is a pure function of
// (dataset length, micro_batch, position); shuffled policy re-draws a
// permutation per epoch with seed mix64(plan.seed, epoch).
class BatchIter {
 public:
  BatchIter(const PackedDataset& dataset, const BatchPlan& plan, int64_t start_step);

  Batch next();                                // one micro-batch
  std::vector<Batch> next_step();              // plan.accumulation micro-batches
  std::vector<int64_t> peek_indices(int64_t n_micro_batches) const;

 private:
  int64_t draw_index();

  const PackedDataset* dataset_;
  BatchPlan plan_;
  int64_t cursor_;  // count of rows consumed since the start of the dataset walk
  std::vector<int64_t> perm_;
  int64_t perm_epoch_;
};

// Assemble a micro-batch from explicit row indices (used for fixed
// validation/diagnostic batches).
Batch make_batch(const PackedDataset& dataset, const std::vector<int64_t>& rows);

// Plain-text corpus: UTF-8, one document per line, bytes as token ids.
std::vector<std::vector<TokenId>> load_text_corpus(const std::string& path);

// Pre-tokenized container: 16-byte header {"WLTK", version u32, vocab u32,
// reserved u32}, then little-endian u16 ids. Documents are separated by the
// EOS id inside the stream, so the loader returns one flat document stream.
void save_token_file(const std::string& path, const std::vector<TokenId>& ids, uint32_t vocab);
std::pair<std::vector<TokenId>, uint32_t> load_token_file(const std::string& path);

}  // namespace widthlab
