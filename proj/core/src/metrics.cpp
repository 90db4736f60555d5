#include "widthlab/metrics.hpp"

#include <cmath>

#include "widthlab/errors.hpp"

namespace widthlab {

namespace {

template <typename T>
std::vector<ForwardTrace<T>> eval_traces(const TrainStateT<T>& st,
                                         const std::vector<Batch>& batches) {
  std::vector<ForwardTrace<T>> traces;
  traces.reserve(batches.size());
  for (const Batch& b : batches)
    traces.push_back(forward(st.params, st.config, b.inputs, RunMode::kEval, std::nullopt, nullptr));
  return traces;
}

}  // namespace

template <typename T>
double kl_zero_vs(const std::vector<ForwardTrace<T>>& parent_traces, const TrainStateT<T>& child,
                  const std::vector<Batch>& batches) {
  if (parent_traces.size() != batches.size())
    throw InputError("kl_zero: trace/batch count mismatch");
  double total = 0.0;
  int64_t positions = 0;
  std::vector<double> lp(static_cast<size_t>(child.config.vocab_size));
  std::vector<double> lc(static_cast<size_t>(child.config.vocab_size));
  for (size_t bi = 0; bi < batches.size(); ++bi) {
    const ForwardTrace<T>& pt = parent_traces[bi];
    const int64_t v_n = pt.logits.dim(2);
    if (v_n != child.config.vocab_size) throw InputError("kl_zero: vocabulary mismatch");
    const ForwardTrace<T> ct =
        forward(child.params, child.config, batches[bi].inputs, RunMode::kEval, std::nullopt, nullptr);
    const int64_t bt = pt.logits.dim(0) * pt.logits.dim(1);
    for (int64_t r = 0; r < bt; ++r) {
      log_softmax_row(pt.logits.ptr() + r * v_n, v_n, lp.data());
      log_softmax_row(ct.logits.ptr() + r * v_n, v_n, lc.data());
      double kl = 0.0;
      for (int64_t v = 0; v < v_n; ++v) {
        const size_t vi = static_cast<size_t>(v);
        kl += std::exp(lp[vi]) * (lp[vi] - lc[vi]);
      }
      total += kl;
    }
    positions += bt;
  }
  if (positions == 0) throw InputError("kl_zero: empty batch set");
  return total / static_cast<double>(positions);
}

template <typename T>
double kl_zero(const TrainStateT<T>& parent, const TrainStateT<T>& child,
               const std::vector<Batch>& val_batches) {
  if (parent.config.vocab_size != child.config.vocab_size)
    throw InputError("kl_zero: vocabulary mismatch");
  return kl_zero_vs(eval_traces(parent, val_batches), child, val_batches);
}

template <typename T>
double rms_drift_vs(const std::vector<ForwardTrace<T>>& parent_traces, const TrainStateT<T>& child,
                    const std::vector<Batch>& batches) {
  if (parent_traces.size() != batches.size())
    throw InputError("rms_drift: trace/batch count mismatch");
  if (batches.empty()) throw InputError("rms_drift: empty batch set");
  double total = 0.0;
  for (size_t bi = 0; bi < batches.size(); ++bi) {
    const ForwardTrace<T>& pt = parent_traces[bi];
    const ForwardTrace<T> ct =
        forward(child.params, child.config, batches[bi].inputs, RunMode::kEval, std::nullopt, nullptr);
    if (pt.block_rms.size() != ct.block_rms.size())
      throw InputError("rms_drift: hidden block count mismatch");
    const size_t blocks = pt.block_rms.size();
    double acc = 0.0;
    for (size_t l = 0; l < blocks; ++l) {
      if (pt.block_rms[l] <= 0.0 || ct.block_rms[l] <= 0.0)
        throw InputError("rms_drift: degenerate (zero-RMS) hidden block");
      acc += std::abs(std::log(ct.block_rms[l] / pt.block_rms[l]));
    }
    total += acc / static_cast<double>(blocks);
  }
  return total / static_cast<double>(batches.size());
}

template <typename T>
double rms_drift(const TrainStateT<T>& parent, const TrainStateT<T>& child,
                 const std::vector<Batch>& batches) {
  return rms_drift_vs(eval_traces(parent, batches), child, batches);
}

template <typename T>
std::optional<double> escape_ratio(const WidenMetadata& meta,
                                   const std::vector<std::pair<std::string, Tensor<T>>>& deltas) {
  double num = 0.0;
  double den = 0.0;
  bool covered = false;
  for (const auto& [name, delta] : deltas) {
    const std::optional<Tensor<T>> projected = project_inherited(meta, name, delta);
    if (!projected.has_value()) continue;
    covered = true;
    for (int64_t i = 0; i < delta.size(); ++i) {
      const double d = static_cast<double>(delta.at(i));
      const double r = d - static_cast<double>(projected->at(i));
      num += r * r;
      den += d * d;
    }
  }
  if (!covered || den == 0.0) return std::nullopt;
  return num / den;
}

template <typename T>
std::optional<double> escape_from_grads(const TrainStateT<T>& candidate, const ParamSet<T>& grads) {
  if (!candidate.widen_meta.has_value()) return std::nullopt;
  const AdamWParams& hp = candidate.optim.hyper;
  const double gscale = clip_scale(grads, hp.grad_clip);
  const int64_t t_hat = candidate.optim.t + 1;
  const double eta = lr_at(candidate.sched, t_hat);
  const auto layout = param_layout(candidate.config);
  std::vector<std::pair<std::string, Tensor<T>>> deltas;
  deltas.reserve(layout.size());
  for (size_t j = 0; j < layout.size(); ++j) {
    if (candidate.widen_meta->find(layout[j].name) == nullptr) continue;
    const int64_t ji = static_cast<int64_t>(j);
    const Tensor<T>& g = grads[ji];
    Tensor<T> m_hat(g.dims);
    Tensor<T> v_hat(g.dims);
    for (int64_t i = 0; i < g.size(); ++i) {
      const double gi = static_cast<double>(g.at(i)) * gscale;
      m_hat.at(i) = static_cast<T>(hp.beta1 * static_cast<double>(candidate.optim.m[ji].at(i)) +
                                   (1.0 - hp.beta1) * gi);
      v_hat.at(i) = static_cast<T>(hp.beta2 * static_cast<double>(candidate.optim.v[ji].at(i)) +
                                   (1.0 - hp.beta2) * gi * gi);
    }
    deltas.emplace_back(layout[j].name,
                        effective_update_from(m_hat, v_hat, candidate.params[ji], t_hat, eta, hp));
  }
  return escape_ratio(*candidate.widen_meta, deltas);
}

template <typename T>
std::optional<double> escape(const TrainStateT<T>& candidate, const std::vector<Batch>& batches) {
  if (!candidate.widen_meta.has_value()) return std::nullopt;
  const LossGrad<T> lg = loss_and_grad(candidate.params, candidate.config, batches, RunMode::kEval,
                                       std::nullopt, nullptr);
  return escape_from_grads(candidate, lg.grads);
}

double auc(const LossTrajectory& traj) {
  if (traj.size() < 2) throw InputError("auc: trajectory needs at least two points");
  double area = 0.0;
  for (size_t i = 0; i + 1 < traj.size(); ++i) {
    if (traj[i + 1].step <= traj[i].step)
      throw InputError("auc: trajectory steps must be strictly increasing");
    if (!std::isfinite(traj[i].loss) || !std::isfinite(traj[i + 1].loss))
      throw InputError("auc: non-finite loss in trajectory");
    area += 0.5 * (traj[i].loss + traj[i + 1].loss) *
            static_cast<double>(traj[i + 1].step - traj[i].step);
  }
  return area;
}

ProbeAggregates probe_aggregates(const std::vector<ProbeEntry>& probe_log) {
  if (probe_log.empty()) throw InputError("probe_aggregates: empty probe log");
  ProbeAggregates agg;
  double esc_sum = 0.0;
  int64_t esc_n = 0;
  for (const ProbeEntry& e : probe_log) {
    agg.mean_kl += e.kl;
    agg.mean_rms_drift += e.rms_drift;
    if (e.escape.has_value()) {
      esc_sum += *e.escape;
      ++esc_n;
    }
  }
  const double n = static_cast<double>(probe_log.size());
  agg.mean_kl /= n;
  agg.mean_rms_drift /= n;
  if (esc_n > 0) agg.mean_escape = esc_sum / static_cast<double>(esc_n);
  return agg;
}

ZeroStepReport zero_step_report(const TrainState& parent, const TrainState& candidate,
                                const std::vector<Batch>& val_batches,
                                const std::vector<Batch>& diag_batches) {
  ZeroStepReport r;
  r.val_loss = eval_loss(candidate.params, candidate.config, val_batches);
  r.kl0 = kl_zero(parent, candidate, diag_batches);
  r.rms_drift = rms_drift(parent, candidate, diag_batches);
  r.escape = escape(candidate, diag_batches);
  return r;
}

template double kl_zero<float>(const TrainStateT<float>&, const TrainStateT<float>&,
                               const std::vector<Batch>&);
template double kl_zero<double>(const TrainStateT<double>&, const TrainStateT<double>&,
                                const std::vector<Batch>&);
template double kl_zero_vs<float>(const std::vector<ForwardTrace<float>>&,
                                  const TrainStateT<float>&, const std::vector<Batch>&);
template double kl_zero_vs<double>(const std::vector<ForwardTrace<double>>&,
                                   const TrainStateT<double>&, const std::vector<Batch>&);
template double rms_drift<float>(const TrainStateT<float>&, const TrainStateT<float>&,
                                 const std::vector<Batch>&);
template double rms_drift<double>(const TrainStateT<double>&, const TrainStateT<double>&,
                                  const std::vector<Batch>&);
template double rms_drift_vs<float>(const std::vector<ForwardTrace<float>>&,
                                    const TrainStateT<float>&, const std::vector<Batch>&);
template double rms_drift_vs<double>(const std::vector<ForwardTrace<double>>&,
                                     const TrainStateT<double>&, const std::vector<Batch>&);
template std::optional<double> escape<float>(const TrainStateT<float>&, const std::vector<Batch>&);
template std::optional<double> escape<double>(const TrainStateT<double>&,
                                              const std::vector<Batch>&);
template std::optional<double> escape_ratio<float>(
    const WidenMetadata&, const std::vector<std::pair<std::string, Tensor<float>>>&);
template std::optional<double> escape_ratio<double>(
    const WidenMetadata&, const std::vector<std::pair<std::string, Tensor<double>>>&);
template std::optional<double> escape_from_grads<float>(const TrainStateT<float>&,
                                                        const ParamSet<float>&);
template std::optional<double> escape_from_grads<double>(const TrainStateT<double>&,
                                                         const ParamSet<double>&);

}  // namespace widthlab
