#include "widthlab/train_state.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "widthlab/errors.hpp"

namespace widthlab {

double lr_at(const SchedState& sched, int64_t step) {
  if (sched.kind == SchedKind::kConstant) return sched.base_lr;
  const int64_t s = step - sched.offset;
  if (s < 0) throw InputError("lr_at: step precedes the schedule offset");
  if (s < sched.warmup_steps)
    return sched.base_lr * static_cast<double>(s) / static_cast<double>(sched.warmup_steps);
  if (s == sched.warmup_steps) return sched.base_lr;
  if (s >= sched.total_steps) return sched.min_lr;
  const double frac = static_cast<double>(s - sched.warmup_steps) /
                      static_cast<double>(sched.total_steps - sched.warmup_steps);
  const double c = 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
  return sched.min_lr + (sched.base_lr - sched.min_lr) * c;
}

TrainStateT<double> to_double(const TrainState& state) {
  TrainStateT<double> out;
  out.config = state.config;
  out.params = state.params.cast<double>();
  out.optim.m = state.optim.m.cast<double>();
  out.optim.v = state.optim.v.cast<double>();
  out.optim.t = state.optim.t;
  out.optim.hyper = state.optim.hyper;
  out.sched = state.sched;
  out.rng = state.rng;
  out.widen_meta = state.widen_meta;
  out.recipe = state.recipe;
  out.provenance = state.provenance;
  out.parent_fingerprint = state.parent_fingerprint;
  return out;
}

TrainState make_train_state(const ModelConfig& cfg, uint64_t init_seed, const AdamWParams& hyper,
                            const SchedState& sched) {
  TrainState st;
  st.config = cfg;
  st.params = init_model<float>(cfg, init_seed);
  st.optim.m = zeros_like_layout<float>(cfg);
  st.optim.v = zeros_like_layout<float>(cfg);
  st.optim.t = 0;
  st.optim.hyper = hyper;
  st.sched = sched;
  st.rng = Rng(mix64(init_seed, 0x72756E00ull));
  return st;
}

template <typename T>
double clip_scale(const ParamSet<T>& grads, double grad_clip) {
  double sq = 0.0;
  for (const auto& g : grads.tensors) sq += sum_sq(g);
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw RunAbortError("gradient norm is non-finite");
  if (grad_clip > 0.0 && norm > grad_clip) return grad_clip / norm;
  return 1.0;
}

template <typename T>
void adamw_step(TrainStateT<T>& state, const ParamSet<T>& grads) {
  if (grads.count() != state.params.count())
    throw InputError("adamw_step: gradient layout mismatch");
  const AdamWParams& hp = state.optim.hyper;
  const double gscale = clip_scale(grads, hp.grad_clip);
  const int64_t t_new = state.optim.t + 1;
  const double eta = lr_at(state.sched, t_new);
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(t_new));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(t_new));
  const double sqrt_bc2 = std::sqrt(bc2);
  for (int64_t j = 0; j < state.params.count(); ++j) {
    Tensor<T>& theta = state.params[j];
    Tensor<T>& m = state.optim.m[j];
    Tensor<T>& v = state.optim.v[j];
    const Tensor<T>& g = grads[j];
    if (!g.same_shape(theta)) throw InputError("adamw_step: gradient shape mismatch");
    for (int64_t i = 0; i < theta.size(); ++i) {
      const double gi = static_cast<double>(g.at(i)) * gscale;
      if (!std::isfinite(gi)) throw RunAbortError("non-finite gradient element after clipping");
      m.at(i) = static_cast<T>(hp.beta1 * static_cast<double>(m.at(i)) + (1.0 - hp.beta1) * gi);
      v.at(i) = static_cast<T>(hp.beta2 * static_cast<double>(v.at(i)) + (1.0 - hp.beta2) * gi * gi);
      const double delta =
          -(eta / bc1) * static_cast<double>(m.at(i)) /
              (std::sqrt(static_cast<double>(v.at(i))) / sqrt_bc2 + hp.eps) -
          eta * hp.weight_decay * static_cast<double>(theta.at(i));
      theta.at(i) = static_cast<T>(static_cast<double>(theta.at(i)) + delta);
    }
  }
  state.optim.t = t_new;
}

template <typename T>
Tensor<T> effective_update_from(const Tensor<T>& m, const Tensor<T>& v, const Tensor<T>& theta,
                                int64_t t, double eta, const AdamWParams& hyper) {
  if (t < 1) throw InputError("effective_update: bias correction needs t >= 1");
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(t));
  const double sqrt_bc2 = std::sqrt(bc2);
  Tensor<T> delta(theta.dims);
  for (int64_t i = 0; i < theta.size(); ++i) {
    delta.at(i) = static_cast<T>(
        -(eta / bc1) * static_cast<double>(m.at(i)) /
            (std::sqrt(static_cast<double>(v.at(i))) / sqrt_bc2 + hyper.eps) -
        eta * hyper.weight_decay * static_cast<double>(theta.at(i)));
  }
  return delta;
}

template <typename T>
Tensor<T> effective_update(const TrainStateT<T>& state, int64_t tensor_idx) {
  return effective_update_from(state.optim.m[tensor_idx], state.optim.v[tensor_idx],
                               state.params[tensor_idx], state.optim.t,
                               lr_at(state.sched, state.optim.t), state.optim.hyper);
}

std::vector<Batch> make_val_batches(const PackedDataset& val, int64_t n_batches,
                                    int64_t micro_batch) {
  if (val.n_rows() == 0) throw ConfigError("validation split is empty");
  std::vector<Batch> out;
  out.reserve(static_cast<size_t>(n_batches));
  int64_t cursor = 0;
  for (int64_t b = 0; b < n_batches; ++b) {
    std::vector<int64_t> rows(static_cast<size_t>(micro_batch));
    for (auto& r : rows) r = (cursor++) % val.n_rows();
    out.push_back(make_batch(val, rows));
  }
  return out;
}

RunLog train(TrainState& state, const PackedDataset& data, const BatchPlan& plan,
             int64_t start_step, int64_t n_steps, const EvalSpec& eval,
             std::optional<double> dropout_override, const StepObserver* observer) {
  if (n_steps < 0) throw ConfigError("train: n_steps must be >= 0");
  if (eval.val == nullptr) throw ConfigError("train: eval_spec needs a validation split");
  if (data.vocab_size != state.config.vocab_size)
    throw InputError("train: dataset vocabulary does not match the model");

  RunLog log;
  const std::vector<Batch> val_batches =
      make_val_batches(*eval.val, eval.n_val_batches, eval.micro_batch);
  auto run_eval = [&](int64_t step) {
    const double vl = eval_loss(state.params, state.config, val_batches);
    if (!std::isfinite(vl)) throw RunAbortError("non-finite validation loss");
    log.evals.push_back({step, vl});
  };

  run_eval(0);
  if (n_steps == 0) return log;

  BatchIter iter(data, plan, start_step);
  for (int64_t s = 1; s <= n_steps; ++s) {
    const std::vector<Batch> micro = iter.next_step();
    const LossGrad<float> lg = loss_and_grad(state.params, state.config, micro, RunMode::kTrain,
                                             dropout_override, &state.rng);
    if (!std::isfinite(lg.loss)) throw RunAbortError("non-finite training loss");
    if (observer && observer->before_step) observer->before_step(state, lg.grads, s);
    adamw_step(state, lg.grads);
    log.steps.push_back({s, lg.loss, lr_at(state.sched, state.optim.t)});
    if (observer && observer->after_step) observer->after_step(state, s);
    if ((eval.cadence > 0 && s % eval.cadence == 0) || s == n_steps) run_eval(s);
  }
  return log;
}

template double clip_scale<float>(const ParamSet<float>&, double);
template double clip_scale<double>(const ParamSet<double>&, double);
template void adamw_step<float>(TrainStateT<float>&, const ParamSet<float>&);
template void adamw_step<double>(TrainStateT<double>&, const ParamSet<double>&);
template Tensor<float> effective_update<float>(const TrainStateT<float>&, int64_t);
template Tensor<double> effective_update<double>(const TrainStateT<double>&, int64_t);
template Tensor<float> effective_update_from<float>(const Tensor<float>&, const Tensor<float>&,
                                                    const Tensor<float>&, int64_t, double,
                                                    const AdamWParams&);
template Tensor<double> effective_update_from<double>(const Tensor<double>&, const Tensor<double>&,
                                                      const Tensor<double>&, int64_t, double,
                                                      const AdamWParams&);

}  // namespace widthlab
