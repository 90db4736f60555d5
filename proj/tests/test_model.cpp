#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "widthlab/errors.hpp"
#include "widthlab/model.hpp"

using namespace widthlab;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_head = 4;
  cfg.context_length = 6;
  cfg.vocab_size = 12;
  cfg.mlp_multiplier = 4.0;
  cfg.dropout_p = 0.0;
  cfg.tied_head = true;
  return cfg;
}

Tensor<TokenId> tokens(const std::vector<std::vector<TokenId>>& rows) {
  Tensor<TokenId> t({static_cast<int64_t>(rows.size()), static_cast<int64_t>(rows[0].size())});
  for (size_t r = 0; r < rows.size(); ++r) {
    for (size_t c = 0; c < rows[r].size(); ++c) t.at(static_cast<int64_t>(r), static_cast<int64_t>(c)) = rows[r][c];
  }
  return t;
}

// Straight-line reference decoder: plain loops, no shared code with the
// production forward. Used as the independent oracle.
std::vector<std::vector<double>> reference_forward(const ParamSet<double>& p,
                                                   const ModelConfig& cfg,
                                                   const std::vector<TokenId>& seq) {
  const ParamIndex idx = param_index(cfg);
  const int64_t d = cfg.d_model, f = cfg.mlp_hidden(), T = static_cast<int64_t>(seq.size());
  auto rms_norm = [&](const std::vector<double>& x, const Tensor<double>& g) {
    double ms = 0.0;
    for (double v : x) ms += v * v;
    ms /= static_cast<double>(x.size());
    const double inv = 1.0 / std::sqrt(ms + 1e-6);
    std::vector<double> y(x.size());
    for (size_t i = 0; i < x.size(); ++i) y[i] = g.at(static_cast<int64_t>(i)) * x[i] * inv;
    return y;
  };
  auto matvec = [&](const Tensor<double>& w, const std::vector<double>& x) {
    std::vector<double> y(static_cast<size_t>(w.dim(0)), 0.0);
    for (int64_t r = 0; r < w.dim(0); ++r) {
      double acc = 0.0;
      for (int64_t c = 0; c < w.dim(1); ++c) acc += w.at(r, c) * x[static_cast<size_t>(c)];
      y[static_cast<size_t>(r)] = acc;
    }
    return y;
  };

  std::vector<std::vector<double>> x(static_cast<size_t>(T), std::vector<double>(static_cast<size_t>(d)));
  for (int64_t t = 0; t < T; ++t) {
    for (int64_t i = 0; i < d; ++i)
      x[static_cast<size_t>(t)][static_cast<size_t>(i)] =
          p[ParamIndex::kTokEmb].at(seq[static_cast<size_t>(t)], i) + p[ParamIndex::kPosEmb].at(t, i);
  }

  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    std::vector<std::vector<double>> q(static_cast<size_t>(T)), k(static_cast<size_t>(T)),
        v(static_cast<size_t>(T));
    for (int64_t t = 0; t < T; ++t) {
      const auto normed = rms_norm(x[static_cast<size_t>(t)], p[idx.layer(l, ParamIndex::kAttnNorm)]);
      q[static_cast<size_t>(t)] = matvec(p[idx.layer(l, ParamIndex::kWq)], normed);
      k[static_cast<size_t>(t)] = matvec(p[idx.layer(l, ParamIndex::kWk)], normed);
      v[static_cast<size_t>(t)] = matvec(p[idx.layer(l, ParamIndex::kWv)], normed);
    }
    for (int64_t t = T - 1; t >= 0; --t) {
      std::vector<double> cat(static_cast<size_t>(d), 0.0);
      for (int64_t h = 0; h < cfg.n_heads; ++h) {
        std::vector<double> scores;
        for (int64_t u = 0; u <= t; ++u) {
          double dot = 0.0;
          for (int64_t i = 0; i < cfg.d_head; ++i)
            dot += q[static_cast<size_t>(t)][static_cast<size_t>(h * cfg.d_head + i)] *
                   k[static_cast<size_t>(u)][static_cast<size_t>(h * cfg.d_head + i)];
          scores.push_back(dot / std::sqrt(static_cast<double>(cfg.d_head)));
        }
        double mx = scores[0];
        for (double s : scores) mx = std::max(mx, s);
        double denom = 0.0;
        for (double s : scores) denom += std::exp(s - mx);
        for (int64_t u = 0; u <= t; ++u) {
          const double prob = std::exp(scores[static_cast<size_t>(u)] - mx) / denom;
          for (int64_t i = 0; i < cfg.d_head; ++i)
            cat[static_cast<size_t>(h * cfg.d_head + i)] +=
                prob * v[static_cast<size_t>(u)][static_cast<size_t>(h * cfg.d_head + i)];
        }
      }
      const auto proj = matvec(p[idx.layer(l, ParamIndex::kWo)], cat);
      for (int64_t i = 0; i < d; ++i) x[static_cast<size_t>(t)][static_cast<size_t>(i)] += proj[static_cast<size_t>(i)];
    }
    for (int64_t t = 0; t < T; ++t) {
      const auto normed = rms_norm(x[static_cast<size_t>(t)], p[idx.layer(l, ParamIndex::kMlpNorm)]);
      const auto gate = matvec(p[idx.layer(l, ParamIndex::kWGate)], normed);
      const auto up = matvec(p[idx.layer(l, ParamIndex::kWUp)], normed);
      std::vector<double> hsw(static_cast<size_t>(f));
      for (int64_t i = 0; i < f; ++i) {
        const double z = gate[static_cast<size_t>(i)];
        hsw[static_cast<size_t>(i)] = z / (1.0 + std::exp(-z)) * up[static_cast<size_t>(i)];
      }
      const auto down = matvec(p[idx.layer(l, ParamIndex::kWDown)], hsw);
      for (int64_t i = 0; i < d; ++i) x[static_cast<size_t>(t)][static_cast<size_t>(i)] += down[static_cast<size_t>(i)];
    }
  }

  std::vector<std::vector<double>> logits(static_cast<size_t>(T));
  const Tensor<double>& head = cfg.tied_head ? p[ParamIndex::kTokEmb] : p[idx.head];
  for (int64_t t = 0; t < T; ++t) {
    const auto normed = rms_norm(x[static_cast<size_t>(t)], p[idx.final_norm]);
    logits[static_cast<size_t>(t)] = matvec(head, normed);
  }
  return logits;
}

}  // namespace

TEST_CASE("init_model is deterministic with unit norm gains") {
  const ModelConfig cfg = tiny_config();
  const ParamSet<float> a = init_model<float>(cfg, 5);
  const ParamSet<float> b = init_model<float>(cfg, 5);
  REQUIRE(a.count() == b.count());
  for (int64_t i = 0; i < a.count(); ++i) {
    REQUIRE(a[i].dims == b[i].dims);
    CHECK(a[i].data == b[i].data);
  }
  const ParamIndex idx = param_index(cfg);
  for (float g : a[idx.layer(0, ParamIndex::kAttnNorm)].data) CHECK(g == 1.0f);
  for (float g : a[idx.final_norm].data) CHECK(g == 1.0f);
  const ParamSet<float> c = init_model<float>(cfg, 6);
  CHECK(a[ParamIndex::kTokEmb].data != c[ParamIndex::kTokEmb].data);
}

TEST_CASE("init_model projection variance is near its target") {
  ModelConfig cfg = tiny_config();
  cfg.d_model = 256;
  cfg.n_heads = 8;
  cfg.d_head = 32;
  cfg.vocab_size = 300;
  const ParamSet<float> p = init_model<float>(cfg, 7);
  const ParamIndex idx = param_index(cfg);
  const TensorF& wq = p[idx.layer(0, ParamIndex::kWq)];
  double var = 0.0;
  for (float v : wq.data) var += static_cast<double>(v) * static_cast<double>(v);
  var /= static_cast<double>(wq.size());
  const double target = 0.02 * 0.02;
  CHECK(var > 0.8 * target);
  CHECK(var < 1.2 * target);
}

TEST_CASE("param_count matches the published parent size") {
  ModelConfig cfg;
  cfg.n_layers = 6;
  cfg.d_model = 256;
  cfg.n_heads = 8;
  cfg.d_head = 32;
  cfg.context_length = 256;
  cfg.vocab_size = 8192;
  cfg.mlp_multiplier = 4.0;
  cfg.tied_head = true;
  CHECK(param_count(cfg) == 8457472);
}

TEST_CASE("param_count: zero layers and brute-force enumeration") {
  ModelConfig cfg = tiny_config();
  cfg.n_layers = 0;
  cfg.tied_head = false;
  CHECK(param_count(cfg) == cfg.vocab_size * cfg.d_model + cfg.context_length * cfg.d_model +
                                cfg.d_model + cfg.vocab_size * cfg.d_model);

  ModelConfig desk;
  desk.n_layers = 2;
  desk.d_model = 64;
  desk.n_heads = 2;
  desk.d_head = 32;
  desk.context_length = 64;
  desk.vocab_size = 258;
  int64_t brute = 0;
  for (const TensorSpec& spec : param_layout(desk)) brute += Tensor<float>::count(spec.dims);
  CHECK(param_count(desk) == brute);
}

TEST_CASE("forward matches the straight-line reference within 1e-10") {
  for (bool tied : {true, false}) {
    ModelConfig cfg = tiny_config();
    cfg.tied_head = tied;
    const ParamSet<double> p = init_model<double>(cfg, 11);
    const std::vector<TokenId> seq{3, 1, 4, 1, 5};
    const auto ref = reference_forward(p, cfg, seq);
    const ForwardTrace<double> trace =
        forward(p, cfg, tokens({seq}), RunMode::kEval, std::nullopt, nullptr);
    for (size_t t = 0; t < seq.size(); ++t) {
      for (int64_t v = 0; v < cfg.vocab_size; ++v) {
        const double a = trace.logits.at(static_cast<int64_t>(t) * cfg.vocab_size + v);
        const double b = ref[t][static_cast<size_t>(v)];
        const double rel = std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12});
        REQUIRE(rel <= 1e-10);
      }
    }
  }
}

TEST_CASE("eval forward is deterministic and train p=0 equals eval") {
  const ModelConfig cfg = tiny_config();
  const ParamSet<float> p = init_model<float>(cfg, 3);
  const Tensor<TokenId> in = tokens({{1, 2, 3, 4}, {5, 6, 7, 8}});
  const auto a = forward(p, cfg, in, RunMode::kEval, 0.5, nullptr);
  const auto b = forward(p, cfg, in, RunMode::kEval, 0.5, nullptr);
  CHECK(a.logits.data == b.logits.data);
  Rng rng(1);
  const auto c = forward(p, cfg, in, RunMode::kTrain, 0.0, &rng);
  CHECK(a.logits.data == c.logits.data);
}

TEST_CASE("forward trace carries per-layer blocks and their RMS") {
  const ModelConfig cfg = tiny_config();
  const ParamSet<float> p = init_model<float>(cfg, 3);
  const auto trace = forward(p, cfg, tokens({{1, 2, 3}}), RunMode::kEval, std::nullopt, nullptr);
  CHECK(trace.hidden_blocks.size() == static_cast<size_t>(cfg.n_layers));
  CHECK(trace.block_rms.size() == static_cast<size_t>(cfg.n_layers) + 1);
  // The final-norm input coincides with the last post-block residual.
  CHECK(trace.final_norm_input.data == trace.hidden_blocks.back().data);
  for (double r : trace.block_rms) CHECK(r > 0.0);
}

TEST_CASE("causality: perturbing position t leaves earlier logits unchanged") {
  const ModelConfig cfg = tiny_config();
  const ParamSet<float> p = init_model<float>(cfg, 9);
  const std::vector<TokenId> base{2, 7, 1, 9, 4, 11};
  const auto base_trace = forward(p, cfg, tokens({base}), RunMode::kEval, std::nullopt, nullptr);
  for (size_t t = 1; t < base.size(); ++t) {
    std::vector<TokenId> mut = base;
    mut[t] = (mut[t] + 3) % cfg.vocab_size;
    const auto b = forward(p, cfg, tokens({mut}), RunMode::kEval, std::nullopt, nullptr);
    for (size_t u = 0; u < t; ++u) {
      for (int64_t v = 0; v < cfg.vocab_size; ++v) {
        REQUIRE(base_trace.logits.at(static_cast<int64_t>(u) * cfg.vocab_size + v) ==
                b.logits.at(static_cast<int64_t>(u) * cfg.vocab_size + v));
      }
    }
  }
}

TEST_CASE("input validation") {
  const ModelConfig cfg = tiny_config();
  const ParamSet<float> p = init_model<float>(cfg, 1);
  CHECK_THROWS_AS(forward(p, cfg, tokens({{0, 12}}), RunMode::kEval, std::nullopt, nullptr),
                  InputError);
  CHECK_THROWS_AS(
      forward(p, cfg, tokens({{0, 1, 2, 3, 4, 5, 6}}), RunMode::kEval, std::nullopt, nullptr),
      InputError);
}

TEST_CASE("uniform-logit model: loss equals ln(vocab)") {
  ModelConfig cfg = tiny_config();
  cfg.n_layers = 0;
  ParamSet<float> p = zeros_like_layout<float>(cfg);
  // zero embeddings -> zero logits -> uniform prediction
  Batch b;
  b.inputs = tokens({{1, 2, 3}});
  b.targets = tokens({{2, 3, 4}});
  const double loss = eval_loss(p, cfg, {b});
  CHECK(loss == doctest::Approx(std::log(static_cast<double>(cfg.vocab_size))).epsilon(1e-12));
}

TEST_CASE("duplicating a micro-batch leaves loss and gradients unchanged") {
  const ModelConfig cfg = tiny_config();
  const ParamSet<float> p = init_model<float>(cfg, 21);
  Batch b;
  b.inputs = tokens({{1, 2, 3, 4}});
  b.targets = tokens({{2, 3, 4, 5}});
  const auto once = loss_and_grad(p, cfg, {b}, RunMode::kEval, std::nullopt, nullptr);
  const auto twice = loss_and_grad(p, cfg, {b, b}, RunMode::kEval, std::nullopt, nullptr);
  CHECK(once.loss == twice.loss);
  for (int64_t j = 0; j < once.grads.count(); ++j) CHECK(once.grads[j].data == twice.grads[j].data);
}

TEST_CASE("gradients match central finite differences (64-bit)") {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_head = 8;
  cfg.context_length = 8;
  cfg.vocab_size = 24;
  cfg.mlp_multiplier = 4.0;
  cfg.tied_head = true;

  ParamSet<double> p = init_model<double>(cfg, 77);
  Batch b;
  b.inputs = tokens({{1, 5, 9, 13, 2, 3}, {20, 4, 7, 0, 23, 8}});
  b.targets = tokens({{5, 9, 13, 2, 3, 6}, {4, 7, 0, 23, 8, 1}});

  const auto analytic = loss_and_grad(p, cfg, {b}, RunMode::kEval, std::nullopt, nullptr);
  auto eval = [&](ParamSet<double>& q) {
    return loss_and_grad(q, cfg, {b}, RunMode::kEval, std::nullopt, nullptr).loss;
  };

  const double h = 1e-4;
  double max_rel = 0.0;
  for (int64_t j = 0; j < p.count(); ++j) {
    for (int64_t i = 0; i < p[j].size(); ++i) {
      const double orig = p[j].at(i);
      p[j].at(i) = orig + h;
      const double lp = eval(p);
      p[j].at(i) = orig - h;
      const double lm = eval(p);
      p[j].at(i) = orig;
      const double fd = (lp - lm) / (2.0 * h);
      const double ga = analytic.grads[j].at(i);
      const double rel = std::abs(ga - fd) / std::max({std::abs(ga), std::abs(fd), 1e-6});
      max_rel = std::max(max_rel, rel);
    }
  }
  CHECK(max_rel <= 1e-4);
}

TEST_CASE("gradients are exact for the dropout graph actually run") {
  ModelConfig cfg = tiny_config();
  ParamSet<double> p = init_model<double>(cfg, 31);
  Batch b;
  b.inputs = tokens({{1, 2, 3, 4, 5}});
  b.targets = tokens({{2, 3, 4, 5, 6}});

  auto eval = [&](ParamSet<double>& q) {
    Rng rng(123);  // identical mask sequence every call
    return loss_and_grad(q, cfg, {b}, RunMode::kTrain, 0.3, &rng).loss;
  };
  Rng rng(123);
  const auto analytic = loss_and_grad(p, cfg, {b}, RunMode::kTrain, 0.3, &rng);

  const double h = 1e-4;
  double max_rel = 0.0;
  Rng probe(9);
  for (int64_t j = 0; j < p.count(); ++j) {
    for (int trial = 0; trial < 8; ++trial) {
      const int64_t i = static_cast<int64_t>(probe.below(static_cast<uint64_t>(p[j].size())));
      const double orig = p[j].at(i);
      p[j].at(i) = orig + h;
      const double lp = eval(p);
      p[j].at(i) = orig - h;
      const double lm = eval(p);
      p[j].at(i) = orig;
      const double fd = (lp - lm) / (2.0 * h);
      const double ga = analytic.grads[j].at(i);
      const double rel = std::abs(ga - fd) / std::max({std::abs(ga), std::abs(fd), 1e-6});
      max_rel = std::max(max_rel, rel);
    }
  }
  CHECK(max_rel <= 1e-4);
}
