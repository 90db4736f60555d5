#include "widthlab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "widthlab/errors.hpp"
#include "widthlab/rng.hpp"
#include "widthlab/version.hpp"

namespace widthlab {

void MarkovGrammar::validate() const {
  if (sub_vocab < 2) throw ConfigError("grammar: sub_vocab must be >= 2");
  if (min_doc_len < 3 || max_doc_len < min_doc_len)
    throw ConfigError("grammar: need 3 <= min_doc_len <= max_doc_len");
  if (base_token < 0 || base_token + sub_vocab > 256)
    throw ConfigError("grammar: symbols must map into byte range");
  if (static_cast<int64_t>(transition.size()) != static_cast<int64_t>(states()) * sub_vocab)
    throw ConfigError("grammar: transition matrix has wrong size");
  for (int s = 0; s < states(); ++s) {
    const double* r = row(s);
    double sum = 0.0;
    for (int v = 0; v < sub_vocab; ++v) {
      if (r[v] < 0.0) throw ConfigError("grammar: negative transition mass");
      sum += r[v];
    }
    if (std::abs(sum - 1.0) > 1e-12) {
      std::ostringstream msg;
      msg << "grammar: state " << s << " row sums to " << sum << ", not 1";
      throw ConfigError(msg.str());
    }
  }
}

MarkovGrammar make_default_grammar(int sub_vocab, uint64_t seed, int support, int min_doc_len,
                                   int max_doc_len) {
  MarkovGrammar g;
  g.sub_vocab = sub_vocab;
  g.min_doc_len = min_doc_len;
  g.max_doc_len = max_doc_len;
  support = std::min(support, sub_vocab);
  g.transition.assign(static_cast<size_t>(g.states()) * sub_vocab, 0.0);
  Rng rng(mix64(seed, 0x6772616Dull));  // independent of the sampling stream
  std::vector<int> symbols(static_cast<size_t>(sub_vocab));
  std::iota(symbols.begin(), symbols.end(), 0);
  for (int s = 0; s < g.states(); ++s) {
    // Pick the support set by partial Fisher-Yates, then weight it 1/rank.
    for (int i = 0; i < support; ++i) {
      const int j = i + static_cast<int>(rng.below(static_cast<uint64_t>(sub_vocab - i)));
      std::swap(symbols[static_cast<size_t>(i)], symbols[static_cast<size_t>(j)]);
    }
    double* r = g.transition.data() + static_cast<size_t>(s) * sub_vocab;
    double total = 0.0;
    for (int i = 0; i < support; ++i) {
      const double w = (1.0 + 0.5 * rng.uniform()) / static_cast<double>(1 + i);
      r[symbols[static_cast<size_t>(i)]] = w;
      total += w;
    }
    for (int v = 0; v < sub_vocab; ++v) r[v] /= total;
    // Pin the row sum to exactly the validator's tolerance by folding the
    // residual into the largest entry.
    double sum = 0.0;
    for (int v = 0; v < sub_vocab; ++v) sum += r[v];
    int argmax = 0;
    for (int v = 1; v < sub_vocab; ++v) {
      if (r[v] > r[argmax]) argmax = v;
    }
    r[argmax] += 1.0 - sum;
  }
  g.validate();
  return g;
}

std::vector<std::vector<TokenId>> gen_synthetic_corpus(uint64_t seed, int64_t n_docs,
                                                       const MarkovGrammar& grammar) {
  grammar.validate();
  if (n_docs < 0) throw ConfigError("gen_synthetic_corpus: n_docs must be >= 0");
  std::vector<std::vector<TokenId>> docs;
  docs.reserve(static_cast<size_t>(n_docs));
  Rng rng(mix64(seed, 0x636F7270ull));
  const int sv = grammar.sub_vocab;
  for (int64_t d = 0; d < n_docs; ++d) {
    const int len = grammar.min_doc_len +
                    static_cast<int>(rng.below(
                        static_cast<uint64_t>(grammar.max_doc_len - grammar.min_doc_len + 1)));
    std::vector<TokenId> doc;
    doc.reserve(static_cast<size_t>(len));
    int prev2 = static_cast<int>(rng.below(static_cast<uint64_t>(sv)));
    int prev1 = static_cast<int>(rng.below(static_cast<uint64_t>(sv)));
    doc.push_back(grammar.base_token + prev2);
    doc.push_back(grammar.base_token + prev1);
    while (static_cast<int>(doc.size()) < len) {
      const double* r = grammar.row(prev2 * sv + prev1);
      const double u = rng.uniform();
      double acc = 0.0;
      int next = sv - 1;
      for (int v = 0; v < sv; ++v) {
        acc += r[v];
        if (u < acc) {
          next = v;
          break;
        }
      }
      doc.push_back(grammar.base_token + next);
      prev2 = prev1;
      prev1 = next;
    }
    docs.push_back(std::move(doc));
  }
  return docs;
}

PackedDataset PackedDataset::slice(int64_t begin, int64_t end, const std::string& note) const {
  if (begin < 0 || end < begin || end > n_rows()) throw ConfigError("dataset slice out of range");
  PackedDataset out;
  out.row_length = row_length;
  out.vocab_size = vocab_size;
  out.provenance = provenance + "; " + note;
  out.tokens.assign(tokens.begin() + begin * row_length, tokens.begin() + end * row_length);
  return out;
}

PackedDataset pack_rows(const std::vector<std::vector<TokenId>>& documents, int64_t row_length,
                        TokenId bos_id, TokenId eos_id, int64_t vocab_size) {
  if (row_length < 2) throw ConfigError("pack_rows: row_length must be >= 2");
  if (bos_id >= vocab_size || eos_id >= vocab_size || bos_id < 0 || eos_id < 0)
    throw ConfigError("pack_rows: sentinel ids must lie inside the vocabulary");
  std::vector<TokenId> stream;
  size_t total = 0;
  for (const auto& d : documents) total += d.size() + 2;
  stream.reserve(total);
  for (const auto& d : documents) {
    stream.push_back(bos_id);
    for (TokenId t : d) {
      if (t < 0 || t >= vocab_size) throw InputError("pack_rows: token id outside vocabulary");
      stream.push_back(t);
    }
    stream.push_back(eos_id);
  }
  PackedDataset out;
  out.row_length = row_length;
  out.vocab_size = vocab_size;
  const int64_t n_rows = static_cast<int64_t>(stream.size()) / row_length;
  out.tokens.assign(stream.begin(), stream.begin() + n_rows * row_length);
  std::ostringstream prov;
  prov << "packed " << documents.size() << " docs into " << n_rows << " rows of " << row_length;
  out.provenance = prov.str();
  return out;
}

BatchIter::BatchIter(const PackedDataset& dataset, const BatchPlan& plan, int64_t start_step)
    : dataset_(&dataset), plan_(plan), perm_epoch_(-1) {
  if (plan.micro_batch < 1 || plan.accumulation < 1)
    throw ConfigError("batch plan: micro_batch and accumulation must be >= 1");
  if (dataset.n_rows() == 0) throw ConfigError("batch iteration over an empty dataset");
  if (plan.micro_batch > dataset.n_rows())
    throw ConfigError("batch plan: micro_batch exceeds dataset rows");
  if (start_step < 0) throw ConfigError("batch plan: start_step must be >= 0");
  cursor_ = start_step * plan.accumulation * plan.micro_batch;
}

int64_t BatchIter::draw_index() {
  const int64_t n = dataset_->n_rows();
  const int64_t epoch = cursor_ / n;
  const int64_t pos = cursor_ % n;
  ++cursor_;
  if (plan_.order_policy == OrderPolicy::kFixed) return pos;
  if (epoch != perm_epoch_) {
    perm_.resize(static_cast<size_t>(n));
    std::iota(perm_.begin(), perm_.end(), static_cast<int64_t>(0));
    Rng rng(mix64(plan_.seed, static_cast<uint64_t>(epoch)));
    for (int64_t i = n - 1; i > 0; --i) {
      const int64_t j = static_cast<int64_t>(rng.below(static_cast<uint64_t>(i + 1)));
      std::swap(perm_[static_cast<size_t>(i)], perm_[static_cast<size_t>(j)]);
    }
    perm_epoch_ = epoch;
  }
  return perm_[static_cast<size_t>(pos)];
}

Batch BatchIter::next() {
  std::vector<int64_t> rows(static_cast<size_t>(plan_.micro_batch));
  for (auto& r : rows) r = draw_index();
  return make_batch(*dataset_, rows);
}

std::vector<Batch> BatchIter::next_step() {
  std::vector<Batch> out;
  out.reserve(static_cast<size_t>(plan_.accumulation));
  for (int64_t i = 0; i < plan_.accumulation; ++i) out.push_back(next());
  return out;
}

std::vector<int64_t> BatchIter::peek_indices(int64_t n_micro_batches) const {
  BatchIter copy(*this);
  std::vector<int64_t> out;
  out.reserve(static_cast<size_t>(n_micro_batches * plan_.micro_batch));
  for (int64_t i = 0; i < n_micro_batches * plan_.micro_batch; ++i) out.push_back(copy.draw_index());
  return out;
}

Batch make_batch(const PackedDataset& dataset, const std::vector<int64_t>& rows) {
  const int64_t t = dataset.row_length - 1;
  Batch b;
  b.inputs = Tensor<TokenId>({static_cast<int64_t>(rows.size()), t});
  b.targets = Tensor<TokenId>({static_cast<int64_t>(rows.size()), t});
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= dataset.n_rows()) throw InputError("make_batch: row out of range");
    const TokenId* row = dataset.row(rows[i]);
    std::memcpy(b.inputs.ptr() + static_cast<int64_t>(i) * t, row, sizeof(TokenId) * static_cast<size_t>(t));
    std::memcpy(b.targets.ptr() + static_cast<int64_t>(i) * t, row + 1, sizeof(TokenId) * static_cast<size_t>(t));
  }
  return b;
}

std::vector<std::vector<TokenId>> load_text_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open text corpus: " + path);
  std::vector<std::vector<TokenId>> docs;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<TokenId> doc;
    doc.reserve(line.size());
    for (unsigned char c : line) doc.push_back(static_cast<TokenId>(c));
    docs.push_back(std::move(doc));
  }
  return docs;
}

namespace {

constexpr char kTokenMagic[4] = {'W', 'L', 'T', 'K'};

void write_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw LoadError("token file: truncated header");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_token_file(const std::string& path, const std::vector<TokenId>& ids, uint32_t vocab) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot open token file for writing: " + path);
  out.write(kTokenMagic, 4);
  write_u32(out, kTokenFileVersion);
  write_u32(out, vocab);
  write_u32(out, 0);  // reserved
  for (TokenId id : ids) {
    if (id < 0 || static_cast<uint32_t>(id) >= vocab || id > 0xFFFF)
      throw InputError("token file: id outside u16/vocab range");
    const uint16_t v = static_cast<uint16_t>(id);
    const unsigned char b[2] = {static_cast<unsigned char>(v & 0xFF),
                                static_cast<unsigned char>(v >> 8)};
    out.write(reinterpret_cast<const char*>(b), 2);
  }
  if (!out) throw LoadError("token file: write failed: " + path);
}

std::pair<std::vector<TokenId>, uint32_t> load_token_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open token file: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kTokenMagic, 4) != 0) throw LoadError("token file: bad magic");
  const uint32_t version = read_u32(in);
  if (version != kTokenFileVersion) throw LoadError("token file: unsupported version");
  const uint32_t vocab = read_u32(in);
  read_u32(in);  // reserved
  std::vector<TokenId> ids;
  for (;;) {
    unsigned char b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    if (in.gcount() == 0 && in.eof()) break;
    if (in.gcount() != 2) throw LoadError("token file: truncated payload");
    const uint16_t v = static_cast<uint16_t>(b[0] | (static_cast<uint16_t>(b[1]) << 8));
    if (v >= vocab) throw LoadError("token file: id outside declared vocabulary");
    ids.push_back(static_cast<TokenId>(v));
  }
  return {std::move(ids), vocab};
}

}  // namespace widthlab
