#pragma once

#include <optional>
#include <string>
#include <vector>

#include "widthlab/corpus.hpp"
#include "widthlab/rng.hpp"
#include "widthlab/tensor.hpp"

namespace widthlab {

struct ModelConfig {
  int64_t n_layers = 2;
  int64_t d_model = 64;
  int64_t n_heads = 2;
  int64_t d_head = 32;
  int64_t context_length = 64;
  int64_t vocab_size = kByteVocabSize;
  double mlp_multiplier = 4.0;
  double dropout_p = 0.0;
  bool tied_head = true;

  int64_t mlp_hidden() const { return static_cast<int64_t>(std::llround(mlp_multiplier * static_cast<double>(d_model))); }
  void validate() const;  // throws ConfigError
  bool operator==(const ModelConfig&) const = default;
};

struct TensorSpec {
  std::string name;
  std::vector<int64_t> dims;
};

// Canonical tensor enumeration shared by parameters, gradients, and
// optimizer moments: tok_emb, pos_emb, then per layer {attn_norm, wq, wk,
// wv, wo, mlp_norm, w_gate, w_up, w_down}, final_norm, and head when untied.
std::vector<TensorSpec> param_layout(const ModelConfig& cfg);

struct ParamIndex {
  static constexpr int64_t kTokEmb = 0;
  static constexpr int64_t kPosEmb = 1;
  static constexpr int64_t kPerLayer = 9;
  enum LayerSlot : int64_t { kAttnNorm = 0, kWq, kWk, kWv, kWo, kMlpNorm, kWGate, kWUp, kWDown };

  int64_t n_layers = 0;
  int64_t final_norm = 0;
  int64_t head = -1;  // -1 when tied
  int64_t count = 0;

  int64_t layer(int64_t l, LayerSlot slot) const { return 2 + kPerLayer * l + slot; }
};

ParamIndex param_index(const ModelConfig& cfg);

template <typename T>
struct ParamSet {
  std::vector<Tensor<T>> tensors;

  Tensor<T>& operator[](int64_t i) { return tensors[static_cast<size_t>(i)]; }
  const Tensor<T>& operator[](int64_t i) const { return tensors[static_cast<size_t>(i)]; }
  int64_t count() const { return static_cast<int64_t>(tensors.size()); }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    out.tensors.reserve(tensors.size());
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }
};

template <typename T>
ParamSet<T> zeros_like_layout(const ModelConfig& cfg);

// Seeded initialization: projections N(0, 0.02), residual-writing
// projections (wo, w_down) N(0, 0.02/sqrt(2*n_layers)), embeddings
// N(0, 0.02), norm gains exactly 1.
template <typename T>
ParamSet<T> init_model(const ModelConfig& cfg, uint64_t seed);

// Closed-form count consistent with param_layout.
int64_t param_count(const ModelConfig& cfg);

enum class RunMode { kTrain, kEval };

template <typename T>
struct ForwardTrace {
  Tensor<T> logits;                      // {B, T, V}
  std::vector<Tensor<T>> hidden_blocks;  // n_layers post-block residuals, each {B, T, D}
  Tensor<T> final_norm_input;            // {B, T, D}
  std::vector<double> block_rms;         // n_layers + 1; the final-norm input is the last entry
};

// Causal decoder forward. Dropout only in train mode, at dropout_override
// when given else cfg.dropout_p; rng may be null when no dropout is drawn.
template <typename T>
ForwardTrace<T> forward(const ParamSet<T>& params, const ModelConfig& cfg,
                        const Tensor<TokenId>& inputs, RunMode mode,
                        std::optional<double> dropout_override, Rng* rng);

template <typename T>
struct LossGrad {
  double loss = 0.0;        // mean cross-entropy, nats/token
  ParamSet<T> grads;        // layout-shaped, mean over all target tokens
  int64_t token_count = 0;
};

// Mean token cross-entropy and exact gradients for the graph actually run
// (dropout masks included). Gradients accumulate over micro-batches and are
// divided once by the total token count.
template <typename T>
LossGrad<T> loss_and_grad(const ParamSet<T>& params, const ModelConfig& cfg,
                          const std::vector<Batch>& micro_batches, RunMode mode,
                          std::optional<double> dropout_override, Rng* rng);

// Dropout-free mean cross-entropy over the given batches.
template <typename T>
double eval_loss(const ParamSet<T>& params, const ModelConfig& cfg,
                 const std::vector<Batch>& batches);

// Log-softmax over the last axis in 64-bit, for one logit row.
void log_softmax_row(const float* logits, int64_t n, double* out);
void log_softmax_row(const double* logits, int64_t n, double* out);

}  // namespace widthlab
