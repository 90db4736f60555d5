#include "widthlab/widen.hpp"

#include <cmath>
#include <sstream>

#include "widthlab/errors.hpp"

namespace widthlab {

const char* recipe_name(Recipe r) {
  switch (r) {
    case Recipe::kScratchLarge: return "scratch_large";
    case Recipe::kExactCopySymmetric: return "exactcopy_symmetric";
    case Recipe::kExactCopyPerturbSymmetric: return "exactcopy_perturb_symmetric";
    case Recipe::kExactCopyAsymReset: return "exactcopy_asymreset";
    case Recipe::kExactCopyAsymResetRewarmup: return "exactcopy_asymreset_rewarmup";
    case Recipe::kRefSubspaceStateCopy: return "refsubspace_statecopy";
  }
  throw ConfigError("unknown recipe");
}

Recipe recipe_from_name(const std::string& name) {
  for (Recipe r : all_recipes()) {
    if (name == recipe_name(r)) return r;
  }
  throw ConfigError("unknown recipe '" + name + "'");
}

std::vector<Recipe> all_recipes() {
  return {Recipe::kScratchLarge,       Recipe::kExactCopySymmetric,
          Recipe::kExactCopyPerturbSymmetric, Recipe::kExactCopyAsymReset,
          Recipe::kExactCopyAsymResetRewarmup, Recipe::kRefSubspaceStateCopy};
}

ModelConfig widened_config(const ModelConfig& parent, int64_t m) {
  if (m < 2) throw ConfigError("widen: multiplier must be >= 2");
  parent.validate();
  ModelConfig child = parent;
  child.d_model = parent.d_model * m;
  child.n_heads = parent.n_heads * m;
  child.tied_head = false;
  child.validate();
  if (child.mlp_hidden() != parent.mlp_hidden() * m)
    throw ConfigError("widen: mlp multiplier does not scale the hidden width integrally");
  return child;
}

namespace {

int64_t clone_parent_index(int64_t c, const WidenAxis& a) {
  const int64_t s = c % a.block;
  const int64_t q = c / a.block;
  return (q / a.factor) * a.block + s;
}

int64_t clone_k(int64_t c, const WidenAxis& a) { return (c / a.block) % a.factor; }

// Per-tensor widening table: which axes widen, the clone block structure,
// and the scale each map kind applies.
struct MapSpec {
  std::string name;
  std::vector<WidenAxis> axes;  // block set for the clone layout
  double clone_scale = 1.0;
  double ref_scale = 1.0;
};

std::vector<MapSpec> widen_map_table(const ModelConfig& parent, int64_t m) {
  const int64_t d = parent.d_model, f = parent.mlp_hidden(), dh = parent.d_head;
  const double inv_m = 1.0 / static_cast<double>(m);
  const double root_m = std::sqrt(static_cast<double>(m));
  const double inv_root_m = 1.0 / root_m;
  auto ax = [&](int axis, int64_t parent_dim, int64_t block) {
    return WidenAxis{axis, parent_dim, m, block};
  };
  std::vector<MapSpec> specs;
  specs.push_back({"tok_emb", {ax(1, d, 1)}, 1.0, root_m});
  specs.push_back({"pos_emb", {ax(1, d, 1)}, 1.0, root_m});
  for (int64_t l = 0; l < parent.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    specs.push_back({p + "attn_norm", {ax(0, d, 1)}, 1.0, 1.0});
    // q/k/v rows widen by whole-head duplication so per-head attention
    // patterns are exactly preserved; wo reads the head-structured axis.
    specs.push_back({p + "wq", {ax(0, d, dh), ax(1, d, 1)}, inv_m, inv_root_m});
    specs.push_back({p + "wk", {ax(0, d, dh), ax(1, d, 1)}, inv_m, inv_root_m});
    specs.push_back({p + "wv", {ax(0, d, dh), ax(1, d, 1)}, inv_m, inv_root_m});
    specs.push_back({p + "wo", {ax(0, d, 1), ax(1, d, dh)}, inv_m, root_m});
    specs.push_back({p + "mlp_norm", {ax(0, d, 1)}, 1.0, 1.0});
    specs.push_back({p + "w_gate", {ax(0, f, 1), ax(1, d, 1)}, inv_m, inv_root_m});
    specs.push_back({p + "w_up", {ax(0, f, 1), ax(1, d, 1)}, inv_m, inv_root_m});
    specs.push_back({p + "w_down", {ax(0, d, 1), ax(1, f, 1)}, inv_m, root_m});
  }
  specs.push_back({"final_norm", {ax(0, d, 1)}, 1.0, 1.0});
  specs.push_back({"head", {ax(1, d, 1)}, inv_m, inv_root_m});
  return specs;
}

std::vector<int64_t> child_dims(const std::vector<int64_t>& parent_dims,
                                const std::vector<WidenAxis>& axes) {
  std::vector<int64_t> dims = parent_dims;
  for (const WidenAxis& a : axes) dims[static_cast<size_t>(a.axis)] = a.child_dim();
  return dims;
}

template <typename T>
Tensor<T> clone_map(const Tensor<T>& parent, const std::vector<WidenAxis>& axes, double scale) {
  Tensor<T> child(child_dims(parent.dims, axes));
  const WidenAxis* a0 = nullptr;
  const WidenAxis* a1 = nullptr;
  for (const WidenAxis& a : axes) (a.axis == 0 ? a0 : a1) = &a;
  const int64_t rows = child.dim(0);
  const int64_t cols = child.rank() == 2 ? child.dim(1) : 1;
  const int64_t pcols = parent.rank() == 2 ? parent.dim(1) : 1;
  for (int64_t r = 0; r < rows; ++r) {
    const int64_t pr = a0 ? clone_parent_index(r, *a0) : r;
    for (int64_t c = 0; c < cols; ++c) {
      const int64_t pc = a1 ? clone_parent_index(c, *a1) : c;
      child.at(r * cols + c) =
          static_cast<T>(static_cast<double>(parent.at(pr * pcols + pc)) * scale);
    }
  }
  return child;
}

template <typename T>
Tensor<T> ref_map(const Tensor<T>& parent, const std::vector<WidenAxis>& axes, double scale) {
  Tensor<T> child(child_dims(parent.dims, axes));
  const int64_t rows = parent.dim(0);
  const int64_t pcols = parent.rank() == 2 ? parent.dim(1) : 1;
  const int64_t ccols = child.rank() == 2 ? child.dim(1) : 1;
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t c = 0; c < pcols; ++c) {
      child.at(r * ccols + c) = static_cast<T>(static_cast<double>(parent.at(r * pcols + c)) * scale);
    }
  }
  return child;
}

void check_parent_finite(const TrainState& parent) {
  for (const auto& t : parent.params.tensors) {
    if (!all_finite(t)) throw InputError("widen: parent tensors must be finite");
  }
}

uint64_t parent_print(const TrainState& parent) { return fingerprint(save_checkpoint(parent)); }

// The parent tensor feeding one child tensor. The child head is sourced
// from the parent head, or from the tied embedding when the parent has one.
template <typename T>
const Tensor<T>& source_tensor(const ModelConfig& parent_cfg, const ParamSet<T>& set,
                               const std::string& child_name) {
  const auto layout = param_layout(parent_cfg);
  for (size_t i = 0; i < layout.size(); ++i) {
    if (layout[i].name == child_name) return set[static_cast<int64_t>(i)];
  }
  if (child_name == "head" && parent_cfg.tied_head) return set[ParamIndex::kTokEmb];
  throw InputError("widen: no parent source for tensor '" + child_name + "'");
}

}  // namespace

template <typename T>
ParamSet<T> widen_parameters(const ParamSet<T>& src, const ModelConfig& parent_config, int64_t m,
                             MapKind kind, bool square_scale) {
  widened_config(parent_config, m);  // validates
  ParamSet<T> out;
  for (const MapSpec& spec : widen_map_table(parent_config, m)) {
    const Tensor<T>& source = source_tensor(parent_config, src, spec.name);
    double scale = kind == MapKind::kClone ? spec.clone_scale : spec.ref_scale;
    if (square_scale) scale *= scale;
    out.tensors.push_back(kind == MapKind::kClone ? clone_map(source, spec.axes, scale)
                                                  : ref_map(source, spec.axes, scale));
  }
  return out;
}

template ParamSet<float> widen_parameters<float>(const ParamSet<float>&, const ModelConfig&,
                                                 int64_t, MapKind, bool);
template ParamSet<double> widen_parameters<double>(const ParamSet<double>&, const ModelConfig&,
                                                   int64_t, MapKind, bool);

namespace {

SchedState constant_at_growth_lr(const TrainState& parent) {
  SchedState s;
  s.kind = SchedKind::kConstant;
  s.base_lr = lr_at(parent.sched, parent.optim.t);
  s.min_lr = s.base_lr;
  s.warmup_steps = 0;
  s.total_steps = 0;
  s.offset = parent.optim.t;
  return s;
}

}  // namespace

CandidateState widen_exactcopy(const TrainState& parent, int64_t m, ExactCopyVariant variant,
                               uint64_t seed, double perturb_sigma) {
  check_parent_finite(parent);
  const uint64_t parent_fp = parent_print(parent);
  const ModelConfig child_cfg = widened_config(parent.config, m);
  const std::vector<MapSpec> table = widen_map_table(parent.config, m);

  WidenMetadata meta;
  meta.m = m;
  switch (variant) {
    case ExactCopyVariant::kSymmetric: meta.recipe = recipe_name(Recipe::kExactCopySymmetric); break;
    case ExactCopyVariant::kPerturbSymmetric:
      meta.recipe = recipe_name(Recipe::kExactCopyPerturbSymmetric);
      meta.perturb_sigma = perturb_sigma;
      break;
    case ExactCopyVariant::kAsymReset: meta.recipe = recipe_name(Recipe::kExactCopyAsymReset); break;
    case ExactCopyVariant::kAsymResetRewarmup:
      meta.recipe = recipe_name(Recipe::kExactCopyAsymResetRewarmup);
      break;
  }

  TrainState child;
  child.config = child_cfg;
  child.optim.hyper = parent.optim.hyper;
  child.optim.t = parent.optim.t;
  child.sched = constant_at_growth_lr(parent);
  child.rng = parent.rng;

  child.params = widen_parameters(parent.params, parent.config, m, MapKind::kClone, false);
  child.optim.m = widen_parameters(parent.optim.m, parent.config, m, MapKind::kClone, false);
  child.optim.v = widen_parameters(parent.optim.v, parent.config, m, MapKind::kClone, true);
  for (const MapSpec& spec : table) {
    TensorWidenRecord rec;
    rec.kind = MapKind::kClone;
    rec.axes = spec.axes;
    rec.scale = spec.clone_scale;
    meta.records.emplace_back(spec.name, rec);
  }

  if (variant == ExactCopyVariant::kPerturbSymmetric) {
    Rng rng(mix64(seed, 0x70657274ull));
    for (auto& t : child.params.tensors) {
      for (auto& x : t.data) x += static_cast<float>(perturb_sigma * rng.gaussian());
    }
  }

  if (variant == ExactCopyVariant::kAsymReset || variant == ExactCopyVariant::kAsymResetRewarmup) {
    // Keep moments only on coordinates whose every clone index is 0.
    for (size_t j = 0; j < table.size(); ++j) {
      const MapSpec& spec = table[j];
      TensorF& mm = child.optim.m[static_cast<int64_t>(j)];
      TensorF& vv = child.optim.v[static_cast<int64_t>(j)];
      const WidenAxis* a0 = nullptr;
      const WidenAxis* a1 = nullptr;
      for (const WidenAxis& a : spec.axes) (a.axis == 0 ? a0 : a1) = &a;
      const int64_t rows = mm.dim(0);
      const int64_t cols = mm.rank() == 2 ? mm.dim(1) : 1;
      for (int64_t r = 0; r < rows; ++r) {
        const bool r_first = !a0 || clone_k(r, *a0) == 0;
        for (int64_t c = 0; c < cols; ++c) {
          const bool c_first = !a1 || clone_k(c, *a1) == 0;
          if (!(r_first && c_first)) {
            mm.at(r * cols + c) = 0.0f;
            vv.at(r * cols + c) = 0.0f;
          }
        }
      }
    }
  }

  if (variant == ExactCopyVariant::kAsymResetRewarmup) {
    SchedState s;
    s.kind = SchedKind::kFreshCosine;
    s.base_lr = parent.sched.base_lr;
    s.min_lr = parent.sched.min_lr;
    s.warmup_steps = 2;
    s.total_steps = 0;  // bound to the continuation horizon at run start
    s.offset = parent.optim.t;
    child.sched = s;
  }

  child.widen_meta = meta;
  child.recipe = meta.recipe;
  child.parent_fingerprint = parent_fp;
  std::ostringstream prov;
  prov << meta.recipe << " m=" << m << " from parent@t=" << parent.optim.t;
  child.provenance = prov.str();
  const std::string name = meta.recipe;
  return {std::move(child), name, parent_fp};
}

CandidateState widen_refsubspace(const TrainState& parent, int64_t m) {
  check_parent_finite(parent);
  const uint64_t parent_fp = parent_print(parent);
  const ModelConfig child_cfg = widened_config(parent.config, m);
  const std::vector<MapSpec> table = widen_map_table(parent.config, m);

  WidenMetadata meta;
  meta.m = m;
  meta.recipe = recipe_name(Recipe::kRefSubspaceStateCopy);

  TrainState child;
  child.config = child_cfg;
  child.optim.hyper = parent.optim.hyper;
  child.optim.t = parent.optim.t;
  child.sched = constant_at_growth_lr(parent);
  child.rng = parent.rng;

  child.params = widen_parameters(parent.params, parent.config, m, MapKind::kRefSlice, false);
  child.optim.m = widen_parameters(parent.optim.m, parent.config, m, MapKind::kRefSlice, false);
  child.optim.v = widen_parameters(parent.optim.v, parent.config, m, MapKind::kRefSlice, true);
  for (const MapSpec& spec : table) {
    TensorWidenRecord rec;
    rec.kind = MapKind::kRefSlice;
    rec.axes = spec.axes;
    for (WidenAxis& a : rec.axes) a.block = 1;  // blocks are a clone-layout notion
    rec.scale = spec.ref_scale;
    meta.records.emplace_back(spec.name, rec);
  }

  child.widen_meta = meta;
  child.recipe = meta.recipe;
  child.parent_fingerprint = parent_fp;
  std::ostringstream prov;
  prov << meta.recipe << " m=" << m << " from parent@t=" << parent.optim.t;
  child.provenance = prov.str();
  const std::string name = meta.recipe;
  return {std::move(child), name, parent_fp};
}

CandidateState scratch_large(const TrainState& parent, const ModelConfig& child_config,
                             uint64_t seed) {
  child_config.validate();
  const uint64_t parent_fp = parent_print(parent);
  TrainState child;
  child.config = child_config;
  child.params = init_model<float>(child_config, seed);
  child.optim.m = zeros_like_layout<float>(child_config);
  child.optim.v = zeros_like_layout<float>(child_config);
  child.optim.t = 0;
  child.optim.hyper = parent.optim.hyper;
  SchedState s;
  s.kind = SchedKind::kConstant;
  s.base_lr = parent.sched.base_lr;
  s.min_lr = parent.sched.base_lr;
  s.warmup_steps = 0;
  s.total_steps = 0;
  s.offset = 0;
  child.sched = s;
  child.rng = Rng(mix64(seed, 0x73637261ull));
  child.recipe = recipe_name(Recipe::kScratchLarge);
  child.parent_fingerprint = parent_fp;
  std::ostringstream prov;
  prov << child.recipe << " seed=" << seed;
  child.provenance = prov.str();
  return {std::move(child), recipe_name(Recipe::kScratchLarge), parent_fp};
}

CandidateState build_candidate(const TrainState& parent, Recipe recipe, int64_t m, uint64_t seed,
                               double perturb_sigma) {
  switch (recipe) {
    case Recipe::kScratchLarge:
      return scratch_large(parent, widened_config(parent.config, m), seed);
    case Recipe::kExactCopySymmetric:
      return widen_exactcopy(parent, m, ExactCopyVariant::kSymmetric, seed, perturb_sigma);
    case Recipe::kExactCopyPerturbSymmetric:
      return widen_exactcopy(parent, m, ExactCopyVariant::kPerturbSymmetric, seed, perturb_sigma);
    case Recipe::kExactCopyAsymReset:
      return widen_exactcopy(parent, m, ExactCopyVariant::kAsymReset, seed, perturb_sigma);
    case Recipe::kExactCopyAsymResetRewarmup:
      return widen_exactcopy(parent, m, ExactCopyVariant::kAsymResetRewarmup, seed, perturb_sigma);
    case Recipe::kRefSubspaceStateCopy:
      return widen_refsubspace(parent, m);
  }
  throw ConfigError("unknown recipe");
}

template <typename T>
std::optional<Tensor<T>> project_inherited(const WidenMetadata& meta, const std::string& name,
                                           const Tensor<T>& value) {
  const TensorWidenRecord* rec = meta.find(name);
  if (rec == nullptr) return std::nullopt;
  for (const WidenAxis& a : rec->axes) {
    if (a.axis >= value.rank() || value.dim(a.axis) != a.child_dim())
      throw InputError("project_inherited: value shape does not match record for '" + name + "'");
  }
  Tensor<T> out = value;
  const int64_t rows = out.dim(0);
  const int64_t cols = out.rank() == 2 ? out.dim(1) : 1;
  if (rec->kind == MapKind::kRefSlice) {
    const WidenAxis* a0 = nullptr;
    const WidenAxis* a1 = nullptr;
    for (const WidenAxis& a : rec->axes) (a.axis == 0 ? a0 : a1) = &a;
    for (int64_t r = 0; r < rows; ++r) {
      const bool r_keep = !a0 || r < a0->parent_dim;
      for (int64_t c = 0; c < cols; ++c) {
        const bool c_keep = !a1 || c < a1->parent_dim;
        if (!(r_keep && c_keep)) out.at(r * cols + c) = T(0);
      }
    }
    return out;
  }
  // Clone mean: average clone groups along each widened axis in turn; the
  // composition is the tensor-product projector.
  for (const WidenAxis& a : rec->axes) {
    const int64_t group_span = a.block * a.factor;
    if (a.axis == 0) {
      for (int64_t g = 0; g < a.parent_dim / a.block; ++g) {
        for (int64_t s = 0; s < a.block; ++s) {
          for (int64_t c = 0; c < cols; ++c) {
            double mean = 0.0;
            for (int64_t k = 0; k < a.factor; ++k)
              mean += static_cast<double>(out.at((g * group_span + k * a.block + s) * cols + c));
            mean /= static_cast<double>(a.factor);
            for (int64_t k = 0; k < a.factor; ++k)
              out.at((g * group_span + k * a.block + s) * cols + c) = static_cast<T>(mean);
          }
        }
      }
    } else {
      for (int64_t r = 0; r < rows; ++r) {
        for (int64_t g = 0; g < a.parent_dim / a.block; ++g) {
          for (int64_t s = 0; s < a.block; ++s) {
            double mean = 0.0;
            for (int64_t k = 0; k < a.factor; ++k)
              mean += static_cast<double>(out.at(r * cols + g * group_span + k * a.block + s));
            mean /= static_cast<double>(a.factor);
            for (int64_t k = 0; k < a.factor; ++k)
              out.at(r * cols + g * group_span + k * a.block + s) = static_cast<T>(mean);
          }
        }
      }
    }
  }
  return out;
}

template std::optional<Tensor<float>> project_inherited<float>(const WidenMetadata&,
                                                               const std::string&,
                                                               const Tensor<float>&);
template std::optional<Tensor<double>> project_inherited<double>(const WidenMetadata&,
                                                                 const std::string&,
                                                                 const Tensor<double>&);

}  // namespace widthlab
