#include "widthlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "widthlab/errors.hpp"

namespace widthlab {

void ModelConfig::validate() const {
  if (n_layers < 0) throw ConfigError("model: n_layers must be >= 0");
  if (d_model < 1 || n_heads < 1 || d_head < 1) throw ConfigError("model: widths must be >= 1");
  if (d_model != n_heads * d_head) throw ConfigError("model: d_model must equal n_heads * d_head");
  if (context_length < 1) throw ConfigError("model: context_length must be >= 1");
  if (vocab_size < 1) throw ConfigError("model: vocab_size must be >= 1");
  if (mlp_multiplier <= 0.0) throw ConfigError("model: mlp_multiplier must be > 0");
  if (mlp_hidden() < 1) throw ConfigError("model: mlp hidden width must be >= 1");
  if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("model: dropout_p must be in [0, 1)");
}

std::vector<TensorSpec> param_layout(const ModelConfig& cfg) {
  cfg.validate();
  const int64_t d = cfg.d_model;
  const int64_t f = cfg.mlp_hidden();
  std::vector<TensorSpec> specs;
  specs.push_back({"tok_emb", {cfg.vocab_size, d}});
  specs.push_back({"pos_emb", {cfg.context_length, d}});
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    specs.push_back({p + "attn_norm", {d}});
    specs.push_back({p + "wq", {d, d}});
    specs.push_back({p + "wk", {d, d}});
    specs.push_back({p + "wv", {d, d}});
    specs.push_back({p + "wo", {d, d}});
    specs.push_back({p + "mlp_norm", {d}});
    specs.push_back({p + "w_gate", {f, d}});
    specs.push_back({p + "w_up", {f, d}});
    specs.push_back({p + "w_down", {d, f}});
  }
  specs.push_back({"final_norm", {d}});
  if (!cfg.tied_head) specs.push_back({"head", {cfg.vocab_size, d}});
  return specs;
}

ParamIndex param_index(const ModelConfig& cfg) {
  ParamIndex idx;
  idx.n_layers = cfg.n_layers;
  idx.final_norm = 2 + ParamIndex::kPerLayer * cfg.n_layers;
  idx.head = cfg.tied_head ? -1 : idx.final_norm + 1;
  idx.count = idx.final_norm + (cfg.tied_head ? 1 : 2);
  return idx;
}

int64_t param_count(const ModelConfig& cfg) {
  cfg.validate();
  const int64_t d = cfg.d_model;
  const int64_t f = cfg.mlp_hidden();
  int64_t n = cfg.vocab_size * d + cfg.context_length * d;
  n += cfg.n_layers * (2 * d + 4 * d * d + 3 * f * d);
  n += d;
  if (!cfg.tied_head) n += cfg.vocab_size * d;
  return n;
}

template <typename T>
ParamSet<T> zeros_like_layout(const ModelConfig& cfg) {
  ParamSet<T> out;
  for (const auto& spec : param_layout(cfg)) out.tensors.emplace_back(spec.dims);
  return out;
}

template <typename T>
ParamSet<T> init_model(const ModelConfig& cfg, uint64_t seed) {
  ParamSet<T> params = zeros_like_layout<T>(cfg);
  const ParamIndex idx = param_index(cfg);
  Rng rng(mix64(seed, 0x696E6974ull));
  const double base_std = 0.02;
  const double resid_std =
      cfg.n_layers > 0 ? base_std / std::sqrt(2.0 * static_cast<double>(cfg.n_layers)) : base_std;

  auto draw = [&](Tensor<T>& t, double std) {
    for (auto& v : t.data) v = static_cast<T>(std * rng.gaussian());
  };

  draw(params[ParamIndex::kTokEmb], base_std);
  draw(params[ParamIndex::kPosEmb], base_std);
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    params[idx.layer(l, ParamIndex::kAttnNorm)].fill(T(1));
    draw(params[idx.layer(l, ParamIndex::kWq)], base_std);
    draw(params[idx.layer(l, ParamIndex::kWk)], base_std);
    draw(params[idx.layer(l, ParamIndex::kWv)], base_std);
    draw(params[idx.layer(l, ParamIndex::kWo)], resid_std);
    params[idx.layer(l, ParamIndex::kMlpNorm)].fill(T(1));
    draw(params[idx.layer(l, ParamIndex::kWGate)], base_std);
    draw(params[idx.layer(l, ParamIndex::kWUp)], base_std);
    draw(params[idx.layer(l, ParamIndex::kWDown)], resid_std);
  }
  params[idx.final_norm].fill(T(1));
  if (!cfg.tied_head) draw(params[idx.head], base_std);
  return params;
}

void log_softmax_row(const float* logits, int64_t n, double* out) {
  double m = static_cast<double>(logits[0]);
  for (int64_t v = 1; v < n; ++v) m = std::max(m, static_cast<double>(logits[v]));
  double sum = 0.0;
  for (int64_t v = 0; v < n; ++v) sum += std::exp(static_cast<double>(logits[v]) - m);
  const double lse = m + std::log(sum);
  for (int64_t v = 0; v < n; ++v) out[v] = static_cast<double>(logits[v]) - lse;
}

void log_softmax_row(const double* logits, int64_t n, double* out) {
  double m = logits[0];
  for (int64_t v = 1; v < n; ++v) m = std::max(m, logits[v]);
  double sum = 0.0;
  for (int64_t v = 0; v < n; ++v) sum += std::exp(logits[v] - m);
  const double lse = m + std::log(sum);
  for (int64_t v = 0; v < n; ++v) out[v] = logits[v] - lse;
}

namespace {

template <typename T>
struct LayerCache {
  Tensor<T> x_in;               // {BT, D}
  std::vector<double> attn_inv;  // per position
  Tensor<T> attn_normed;
  Tensor<T> q, k, v;   // {BT, D}
  Tensor<T> probs;     // {B, H, T, T}, lower triangular
  Tensor<T> attn_cat;  // {BT, D}
  Tensor<T> attn_mult;  // dropout multipliers, empty when inactive
  Tensor<T> x_mid;      // {BT, D}
  std::vector<double> mlp_inv;
  Tensor<T> mlp_normed;
  Tensor<T> gate, up, hsw;  // {BT, F}
  Tensor<T> mlp_mult;
};

template <typename T>
struct FwdCache {
  int64_t batch = 0, time = 0;
  Tensor<T> x;  // running residual stream, ends as final-norm input {BT, D}
  std::vector<LayerCache<T>> layers;
  std::vector<double> fn_inv;
  Tensor<T> final_normed;
  Tensor<T> logits;  // {BT, V}
};

// y = gain .* x / rms(x), 64-bit mean-of-squares, eps inside the sqrt.
template <typename T>
void rmsnorm_fwd(const Tensor<T>& x, const Tensor<T>& gain, Tensor<T>& y,
                 std::vector<double>& inv_out) {
  const int64_t rows = x.dim(0), d = x.dim(1);
  inv_out.resize(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * d;
    double ms = 0.0;
    for (int64_t i = 0; i < d; ++i) ms += static_cast<double>(xr[i]) * static_cast<double>(xr[i]);
    ms /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(ms + 1e-6);
    inv_out[static_cast<size_t>(r)] = inv;
    T* yr = y.ptr() + r * d;
    for (int64_t i = 0; i < d; ++i)
      yr[i] = static_cast<T>(static_cast<double>(gain.at(i)) * static_cast<double>(xr[i]) * inv);
  }
}

template <typename T>
void rmsnorm_bwd(const Tensor<T>& x, const std::vector<double>& inv, const Tensor<T>& gain,
                 const Tensor<T>& dy, Tensor<T>& dx_accum, Tensor<T>& dgain) {
  const int64_t rows = x.dim(0), d = x.dim(1);
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * d;
    const T* dyr = dy.ptr() + r * d;
    T* dxr = dx_accum.ptr() + r * d;
    const double iv = inv[static_cast<size_t>(r)];
    double s = 0.0;
    for (int64_t i = 0; i < d; ++i)
      s += static_cast<double>(dyr[i]) * static_cast<double>(gain.at(i)) * static_cast<double>(xr[i]);
    const double k = iv * iv * iv * s / static_cast<double>(d);
    for (int64_t i = 0; i < d; ++i) {
      dxr[i] += static_cast<T>(static_cast<double>(dyr[i]) * static_cast<double>(gain.at(i)) * iv -
                               static_cast<double>(xr[i]) * k);
      dgain.at(i) += static_cast<T>(static_cast<double>(dyr[i]) * static_cast<double>(xr[i]) * iv);
    }
  }
}

template <typename T>
void apply_dropout(Tensor<T>& x, Tensor<T>& mult, double p, Rng* rng) {
  mult = Tensor<T>(x.dims);
  const T keep = static_cast<T>(1.0 / (1.0 - p));
  for (int64_t i = 0; i < x.size(); ++i) {
    const T m = rng->uniform() < p ? T(0) : keep;
    mult.at(i) = m;
    x.at(i) = x.at(i) * m;
  }
}

// Causal scaled-dot-product attention over per-head slices of q/k/v.
template <typename T>
void attention_fwd(const ModelConfig& cfg, int64_t batch, int64_t time, const Tensor<T>& q,
                   const Tensor<T>& k, const Tensor<T>& v, Tensor<T>& probs, Tensor<T>& cat) {
  const int64_t d = cfg.d_model, h_n = cfg.n_heads, dh = cfg.d_head;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> scores(static_cast<size_t>(time));
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t h = 0; h < h_n; ++h) {
      T* pr = probs.ptr() + ((b * h_n + h) * time) * time;
      for (int64_t t = 0; t < time; ++t) {
        const T* qt = q.ptr() + (b * time + t) * d + h * dh;
        double mx = -1e300;
        for (int64_t u = 0; u <= t; ++u) {
          const T* ku = k.ptr() + (b * time + u) * d + h * dh;
          double dot = 0.0;
          for (int64_t i = 0; i < dh; ++i)
            dot += static_cast<double>(qt[i]) * static_cast<double>(ku[i]);
          scores[static_cast<size_t>(u)] = dot * scale;
          mx = std::max(mx, scores[static_cast<size_t>(u)]);
        }
        double denom = 0.0;
        for (int64_t u = 0; u <= t; ++u) denom += std::exp(scores[static_cast<size_t>(u)] - mx);
        T* prt = pr + t * time;
        for (int64_t u = 0; u <= t; ++u)
          prt[u] = static_cast<T>(std::exp(scores[static_cast<size_t>(u)] - mx) / denom);
        T* out = cat.ptr() + (b * time + t) * d + h * dh;
        for (int64_t i = 0; i < dh; ++i) out[i] = T(0);
        for (int64_t u = 0; u <= t; ++u) {
          const T p = prt[u];
          const T* vu = v.ptr() + (b * time + u) * d + h * dh;
          for (int64_t i = 0; i < dh; ++i) out[i] += p * vu[i];
        }
      }
    }
  }
}

template <typename T>
void attention_bwd(const ModelConfig& cfg, int64_t batch, int64_t time, const Tensor<T>& q,
                   const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& probs,
                   const Tensor<T>& dcat, Tensor<T>& dq, Tensor<T>& dk, Tensor<T>& dv) {
  const int64_t d = cfg.d_model, h_n = cfg.n_heads, dh = cfg.d_head;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> dprob(static_cast<size_t>(time));
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t h = 0; h < h_n; ++h) {
      const T* pr = probs.ptr() + ((b * h_n + h) * time) * time;
      for (int64_t t = 0; t < time; ++t) {
        const T* dout = dcat.ptr() + (b * time + t) * d + h * dh;
        const T* prt = pr + t * time;
        double row_dot = 0.0;
        for (int64_t u = 0; u <= t; ++u) {
          const T* vu = v.ptr() + (b * time + u) * d + h * dh;
          double dp = 0.0;
          for (int64_t i = 0; i < dh; ++i)
            dp += static_cast<double>(dout[i]) * static_cast<double>(vu[i]);
          dprob[static_cast<size_t>(u)] = dp;
          row_dot += static_cast<double>(prt[u]) * dp;
          T* dvu = dv.ptr() + (b * time + u) * d + h * dh;
          for (int64_t i = 0; i < dh; ++i) dvu[i] += prt[u] * dout[i];
        }
        const T* qt = q.ptr() + (b * time + t) * d + h * dh;
        T* dqt = dq.ptr() + (b * time + t) * d + h * dh;
        for (int64_t u = 0; u <= t; ++u) {
          const double ds = static_cast<double>(prt[u]) * (dprob[static_cast<size_t>(u)] - row_dot) * scale;
          const T* ku = k.ptr() + (b * time + u) * d + h * dh;
          T* dku = dk.ptr() + (b * time + u) * d + h * dh;
          for (int64_t i = 0; i < dh; ++i) {
            dqt[i] += static_cast<T>(ds * static_cast<double>(ku[i]));
            dku[i] += static_cast<T>(ds * static_cast<double>(qt[i]));
          }
        }
      }
    }
  }
}

template <typename T>
T silu(T z) {
  const double zd = static_cast<double>(z);
  return static_cast<T>(zd / (1.0 + std::exp(-zd)));
}

template <typename T>
T silu_grad(T z) {
  const double zd = static_cast<double>(z);
  const double s = 1.0 / (1.0 + std::exp(-zd));
  return static_cast<T>(s * (1.0 + zd * (1.0 - s)));
}

template <typename T>
void run_forward(const ParamSet<T>& params, const ModelConfig& cfg, const Tensor<TokenId>& inputs,
                 RunMode mode, std::optional<double> dropout_override, Rng* rng, FwdCache<T>& fc) {
  cfg.validate();
  if (inputs.rank() != 2) throw InputError("forward: inputs must be batch x time");
  const int64_t batch = inputs.dim(0), time = inputs.dim(1);
  if (time > cfg.context_length) throw InputError("forward: sequence longer than context");
  for (int64_t i = 0; i < inputs.size(); ++i) {
    if (inputs.at(i) < 0 || inputs.at(i) >= cfg.vocab_size)
      throw InputError("forward: token id outside vocabulary");
  }
  const double p = mode == RunMode::kTrain
                       ? (dropout_override.has_value() ? *dropout_override : cfg.dropout_p)
                       : 0.0;
  if (p < 0.0 || p >= 1.0) throw ConfigError("forward: dropout probability must be in [0, 1)");
  if (p > 0.0 && rng == nullptr) throw InputError("forward: dropout requires an RNG stream");

  const ParamIndex idx = param_index(cfg);
  const int64_t d = cfg.d_model, f = cfg.mlp_hidden(), bt = batch * time;

  fc.batch = batch;
  fc.time = time;
  fc.x = Tensor<T>({bt, d});
  const Tensor<T>& tok = params[ParamIndex::kTokEmb];
  const Tensor<T>& pos = params[ParamIndex::kPosEmb];
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t t = 0; t < time; ++t) {
      T* xr = fc.x.ptr() + (b * time + t) * d;
      const T* tr = tok.ptr() + static_cast<int64_t>(inputs.at(b, t)) * d;
      const T* pr = pos.ptr() + t * d;
      for (int64_t i = 0; i < d; ++i) xr[i] = tr[i] + pr[i];
    }
  }

  fc.layers.clear();
  fc.layers.resize(static_cast<size_t>(cfg.n_layers));
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    LayerCache<T>& lc = fc.layers[static_cast<size_t>(l)];
    lc.x_in = fc.x;
    lc.attn_normed = Tensor<T>({bt, d});
    rmsnorm_fwd(lc.x_in, params[idx.layer(l, ParamIndex::kAttnNorm)], lc.attn_normed, lc.attn_inv);

    lc.q = Tensor<T>({bt, d});
    lc.k = Tensor<T>({bt, d});
    lc.v = Tensor<T>({bt, d});
    mat_view(lc.q).noalias() =
        mat_view(lc.attn_normed) * mat_view(params[idx.layer(l, ParamIndex::kWq)]).transpose();
    mat_view(lc.k).noalias() =
        mat_view(lc.attn_normed) * mat_view(params[idx.layer(l, ParamIndex::kWk)]).transpose();
    mat_view(lc.v).noalias() =
        mat_view(lc.attn_normed) * mat_view(params[idx.layer(l, ParamIndex::kWv)]).transpose();

    lc.probs = Tensor<T>({batch, cfg.n_heads, time, time});
    lc.attn_cat = Tensor<T>({bt, d});
    attention_fwd(cfg, batch, time, lc.q, lc.k, lc.v, lc.probs, lc.attn_cat);

    Tensor<T> proj({bt, d});
    mat_view(proj).noalias() =
        mat_view(lc.attn_cat) * mat_view(params[idx.layer(l, ParamIndex::kWo)]).transpose();
    if (p > 0.0) apply_dropout(proj, lc.attn_mult, p, rng);
    for (int64_t i = 0; i < bt * d; ++i) fc.x.at(i) = lc.x_in.at(i) + proj.at(i);

    lc.x_mid = fc.x;
    lc.mlp_normed = Tensor<T>({bt, d});
    rmsnorm_fwd(lc.x_mid, params[idx.layer(l, ParamIndex::kMlpNorm)], lc.mlp_normed, lc.mlp_inv);

    lc.gate = Tensor<T>({bt, f});
    lc.up = Tensor<T>({bt, f});
    mat_view(lc.gate).noalias() =
        mat_view(lc.mlp_normed) * mat_view(params[idx.layer(l, ParamIndex::kWGate)]).transpose();
    mat_view(lc.up).noalias() =
        mat_view(lc.mlp_normed) * mat_view(params[idx.layer(l, ParamIndex::kWUp)]).transpose();
    lc.hsw = Tensor<T>({bt, f});
    for (int64_t i = 0; i < bt * f; ++i) lc.hsw.at(i) = silu(lc.gate.at(i)) * lc.up.at(i);

    Tensor<T> down({bt, d});
    mat_view(down).noalias() =
        mat_view(lc.hsw) * mat_view(params[idx.layer(l, ParamIndex::kWDown)]).transpose();
    if (p > 0.0) apply_dropout(down, lc.mlp_mult, p, rng);
    for (int64_t i = 0; i < bt * d; ++i) fc.x.at(i) = lc.x_mid.at(i) + down.at(i);
  }

  fc.final_normed = Tensor<T>({bt, d});
  rmsnorm_fwd(fc.x, params[idx.final_norm], fc.final_normed, fc.fn_inv);

  const Tensor<T>& head = cfg.tied_head ? params[ParamIndex::kTokEmb] : params[idx.head];
  fc.logits = Tensor<T>({bt, cfg.vocab_size});
  mat_view(fc.logits).noalias() = mat_view(fc.final_normed) * mat_view(head).transpose();
}

template <typename T>
double block_rms(const Tensor<T>& t) {
  return std::sqrt(sum_sq(t) / static_cast<double>(t.size()));
}

// Backward from raw (un-normalized) dlogits; accumulates into grads.
template <typename T>
void run_backward(const ParamSet<T>& params, const ModelConfig& cfg, const Tensor<TokenId>& inputs,
                  const FwdCache<T>& fc, const Tensor<T>& dlogits, ParamSet<T>& grads) {
  const ParamIndex idx = param_index(cfg);
  const int64_t batch = fc.batch, time = fc.time;
  const int64_t d = cfg.d_model, f = cfg.mlp_hidden(), bt = batch * time;

  const Tensor<T>& head = cfg.tied_head ? params[ParamIndex::kTokEmb] : params[idx.head];
  Tensor<T>& dhead = cfg.tied_head ? grads[ParamIndex::kTokEmb] : grads[idx.head];

  Tensor<T> dfn({bt, d});
  mat_view(dfn).noalias() = mat_view(dlogits) * mat_view(head);
  mat_view(dhead).noalias() += mat_view(dlogits).transpose() * mat_view(fc.final_normed);

  Tensor<T> dx({bt, d});
  rmsnorm_bwd(fc.x, fc.fn_inv, params[idx.final_norm], dfn, dx, grads[idx.final_norm]);

  for (int64_t l = cfg.n_layers - 1; l >= 0; --l) {
    const LayerCache<T>& lc = fc.layers[static_cast<size_t>(l)];

    // MLP block: x_out = x_mid + drop(w_down . hsw)
    Tensor<T> ddown = dx;
    if (lc.mlp_mult.size() > 0) {
      for (int64_t i = 0; i < bt * d; ++i) ddown.at(i) *= lc.mlp_mult.at(i);
    }
    Tensor<T> dhsw({bt, f});
    mat_view(dhsw).noalias() = mat_view(ddown) * mat_view(params[idx.layer(l, ParamIndex::kWDown)]);
    mat_view(grads[idx.layer(l, ParamIndex::kWDown)]).noalias() +=
        mat_view(ddown).transpose() * mat_view(lc.hsw);

    Tensor<T> dgate({bt, f});
    Tensor<T> dup({bt, f});
    for (int64_t i = 0; i < bt * f; ++i) {
      dgate.at(i) = dhsw.at(i) * lc.up.at(i) * silu_grad(lc.gate.at(i));
      dup.at(i) = dhsw.at(i) * silu(lc.gate.at(i));
    }
    Tensor<T> dmlp_normed({bt, d});
    mat_view(dmlp_normed).noalias() =
        mat_view(dgate) * mat_view(params[idx.layer(l, ParamIndex::kWGate)]);
    mat_view(dmlp_normed).noalias() +=
        mat_view(dup) * mat_view(params[idx.layer(l, ParamIndex::kWUp)]);
    mat_view(grads[idx.layer(l, ParamIndex::kWGate)]).noalias() +=
        mat_view(dgate).transpose() * mat_view(lc.mlp_normed);
    mat_view(grads[idx.layer(l, ParamIndex::kWUp)]).noalias() +=
        mat_view(dup).transpose() * mat_view(lc.mlp_normed);

    rmsnorm_bwd(lc.x_mid, lc.mlp_inv, params[idx.layer(l, ParamIndex::kMlpNorm)], dmlp_normed, dx,
                grads[idx.layer(l, ParamIndex::kMlpNorm)]);

    // Attention block: x_mid = x_in + drop(wo . cat)
    Tensor<T> dproj = dx;
    if (lc.attn_mult.size() > 0) {
      for (int64_t i = 0; i < bt * d; ++i) dproj.at(i) *= lc.attn_mult.at(i);
    }
    Tensor<T> dcat({bt, d});
    mat_view(dcat).noalias() = mat_view(dproj) * mat_view(params[idx.layer(l, ParamIndex::kWo)]);
    mat_view(grads[idx.layer(l, ParamIndex::kWo)]).noalias() +=
        mat_view(dproj).transpose() * mat_view(lc.attn_cat);

    Tensor<T> dq({bt, d});
    Tensor<T> dk({bt, d});
    Tensor<T> dv({bt, d});
    attention_bwd(cfg, batch, time, lc.q, lc.k, lc.v, lc.probs, dcat, dq, dk, dv);

    Tensor<T> dattn_normed({bt, d});
    mat_view(dattn_normed).noalias() = mat_view(dq) * mat_view(params[idx.layer(l, ParamIndex::kWq)]);
    mat_view(dattn_normed).noalias() += mat_view(dk) * mat_view(params[idx.layer(l, ParamIndex::kWk)]);
    mat_view(dattn_normed).noalias() += mat_view(dv) * mat_view(params[idx.layer(l, ParamIndex::kWv)]);
    mat_view(grads[idx.layer(l, ParamIndex::kWq)]).noalias() +=
        mat_view(dq).transpose() * mat_view(lc.attn_normed);
    mat_view(grads[idx.layer(l, ParamIndex::kWk)]).noalias() +=
        mat_view(dk).transpose() * mat_view(lc.attn_normed);
    mat_view(grads[idx.layer(l, ParamIndex::kWv)]).noalias() +=
        mat_view(dv).transpose() * mat_view(lc.attn_normed);

    rmsnorm_bwd(lc.x_in, lc.attn_inv, params[idx.layer(l, ParamIndex::kAttnNorm)], dattn_normed, dx,
                grads[idx.layer(l, ParamIndex::kAttnNorm)]);
  }

  Tensor<T>& dtok = grads[ParamIndex::kTokEmb];
  Tensor<T>& dpos = grads[ParamIndex::kPosEmb];
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t t = 0; t < time; ++t) {
      const T* dxr = dx.ptr() + (b * time + t) * d;
      T* dt = dtok.ptr() + static_cast<int64_t>(inputs.at(b, t)) * d;
      T* dp = dpos.ptr() + t * d;
      for (int64_t i = 0; i < d; ++i) {
        dt[i] += dxr[i];
        dp[i] += dxr[i];
      }
    }
  }
}

}  // namespace

template <typename T>
ForwardTrace<T> forward(const ParamSet<T>& params, const ModelConfig& cfg,
                        const Tensor<TokenId>& inputs, RunMode mode,
                        std::optional<double> dropout_override, Rng* rng) {
  FwdCache<T> fc;
  run_forward(params, cfg, inputs, mode, dropout_override, rng, fc);
  const int64_t batch = fc.batch, time = fc.time, d = cfg.d_model;
  ForwardTrace<T> trace;
  trace.logits = std::move(fc.logits);
  trace.logits.dims = {batch, time, cfg.vocab_size};
  trace.hidden_blocks.reserve(static_cast<size_t>(cfg.n_layers));
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    const Tensor<T>& block =
        l + 1 < cfg.n_layers ? fc.layers[static_cast<size_t>(l + 1)].x_in : fc.x;
    Tensor<T> copy = block;
    copy.dims = {batch, time, d};
    trace.block_rms.push_back(block_rms(copy));
    trace.hidden_blocks.push_back(std::move(copy));
  }
  trace.final_norm_input = fc.x;
  trace.final_norm_input.dims = {batch, time, d};
  trace.block_rms.push_back(block_rms(trace.final_norm_input));
  return trace;
}

template <typename T>
LossGrad<T> loss_and_grad(const ParamSet<T>& params, const ModelConfig& cfg,
                          const std::vector<Batch>& micro_batches, RunMode mode,
                          std::optional<double> dropout_override, Rng* rng) {
  LossGrad<T> out;
  out.grads = zeros_like_layout<T>(cfg);
  double loss_sum = 0.0;
  int64_t tokens = 0;
  std::vector<double> logp(static_cast<size_t>(cfg.vocab_size));
  for (const Batch& mb : micro_batches) {
    FwdCache<T> fc;
    run_forward(params, cfg, mb.inputs, mode, dropout_override, rng, fc);
    const int64_t bt = fc.batch * fc.time, v_n = cfg.vocab_size;
    Tensor<T> dlogits({bt, v_n});
    double batch_loss = 0.0;
    for (int64_t r = 0; r < bt; ++r) {
      const T* lr = fc.logits.ptr() + r * v_n;
      log_softmax_row(lr, v_n, logp.data());
      const TokenId target = mb.targets.at(r);
      batch_loss -= logp[static_cast<size_t>(target)];
      T* dl = dlogits.ptr() + r * v_n;
      for (int64_t v = 0; v < v_n; ++v) dl[v] = static_cast<T>(std::exp(logp[static_cast<size_t>(v)]));
      dl[target] -= T(1);
    }
    loss_sum += batch_loss;
    tokens += bt;
    // Per-batch gradient buffer folded in with one add per element, so the
    // mean over tokens is invariant to duplicating a micro-batch.
    ParamSet<T> batch_grads = zeros_like_layout<T>(cfg);
    run_backward(params, cfg, mb.inputs, fc, dlogits, batch_grads);
    for (int64_t j = 0; j < out.grads.count(); ++j) {
      Tensor<T>& acc = out.grads[j];
      const Tensor<T>& g = batch_grads[j];
      for (int64_t i = 0; i < acc.size(); ++i) acc.at(i) += g.at(i);
    }
  }
  if (tokens == 0) throw InputError("loss_and_grad: no target tokens");
  const double inv_n = 1.0 / static_cast<double>(tokens);
  for (auto& g : out.grads.tensors) {
    for (auto& x : g.data) x = static_cast<T>(static_cast<double>(x) * inv_n);
  }
  out.loss = loss_sum * inv_n;
  out.token_count = tokens;
  return out;
}

template <typename T>
double eval_loss(const ParamSet<T>& params, const ModelConfig& cfg,
                 const std::vector<Batch>& batches) {
  double loss_sum = 0.0;
  int64_t tokens = 0;
  std::vector<double> logp(static_cast<size_t>(cfg.vocab_size));
  for (const Batch& mb : batches) {
    FwdCache<T> fc;
    run_forward(params, cfg, mb.inputs, RunMode::kEval, std::nullopt, nullptr, fc);
    const int64_t bt = fc.batch * fc.time, v_n = cfg.vocab_size;
    for (int64_t r = 0; r < bt; ++r) {
      log_softmax_row(fc.logits.ptr() + r * v_n, v_n, logp.data());
      loss_sum -= logp[static_cast<size_t>(mb.targets.at(r))];
    }
    tokens += bt;
  }
  if (tokens == 0) throw InputError("eval_loss: no target tokens");
  return loss_sum / static_cast<double>(tokens);
}

template ParamSet<float> zeros_like_layout<float>(const ModelConfig&);
template ParamSet<double> zeros_like_layout<double>(const ModelConfig&);
template ParamSet<float> init_model<float>(const ModelConfig&, uint64_t);
template ParamSet<double> init_model<double>(const ModelConfig&, uint64_t);
template ForwardTrace<float> forward<float>(const ParamSet<float>&, const ModelConfig&,
                                            const Tensor<TokenId>&, RunMode, std::optional<double>,
                                            Rng*);
template ForwardTrace<double> forward<double>(const ParamSet<double>&, const ModelConfig&,
                                              const Tensor<TokenId>&, RunMode,
                                              std::optional<double>, Rng*);
template LossGrad<float> loss_and_grad<float>(const ParamSet<float>&, const ModelConfig&,
                                              const std::vector<Batch>&, RunMode,
                                              std::optional<double>, Rng*);
template LossGrad<double> loss_and_grad<double>(const ParamSet<double>&, const ModelConfig&,
                                                const std::vector<Batch>&, RunMode,
                                                std::optional<double>, Rng*);
template double eval_loss<float>(const ParamSet<float>&, const ModelConfig&,
                                 const std::vector<Batch>&);
template double eval_loss<double>(const ParamSet<double>&, const ModelConfig&,
                                  const std::vector<Batch>&);

}  // namespace widthlab
