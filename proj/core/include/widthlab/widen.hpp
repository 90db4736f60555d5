#pragma once

#include <optional>
#include <string>
#include <vector>

#include "widthlab/train_state.hpp"
#include "widthlab/widen_meta.hpp"

namespace widthlab {

enum class Recipe {
  kScratchLarge,
  kExactCopySymmetric,
  kExactCopyPerturbSymmetric,
  kExactCopyAsymReset,
  kExactCopyAsymResetRewarmup,
  kRefSubspaceStateCopy,
};

const char* recipe_name(Recipe r);
Recipe recipe_from_name(const std::string& name);
std::vector<Recipe> all_recipes();

// A widened (or fresh) full training state derived from one parent.
struct CandidateState {
  TrainState state;
  std::string recipe;
  uint64_t parent_fingerprint = 0;
};

// Child family shape: d_model, n_heads, and the MLP hidden width scale by
// m; d_head, depth, vocabulary, and context stay fixed; the head is untied.
ModelConfig widened_config(const ModelConfig& parent, int64_t m);

enum class ExactCopyVariant { kSymmetric, kPerturbSymmetric, kAsymReset, kAsymResetRewarmup };

// Clone-based exact copy: hidden coordinates are repeated m times (whole
// heads are duplicated on head-structured axes), tensors that read a
// widened axis are scaled 1/m, so the child function equals the parent's at
// step 0. Moments transport through the same linear map (v through its
// square); the scheduler holds the growth-step learning rate; t is
// inherited.
CandidateState widen_exactcopy(const TrainState& parent, int64_t m, ExactCopyVariant variant,
                               uint64_t seed, double perturb_sigma = 1e-3);

// Reference-subspace embedding: the parent occupies slice 0 of every
// widened axis, added slices start dormant (zero), write-in maps carry
// sqrt(m) and read-out maps 1/sqrt(m) so both the function and the RMSNorm
// statistics are preserved. Optimizer state lands only in the reference
// slice.
CandidateState widen_refsubspace(const TrainState& parent, int64_t m);

// Fresh large child: seeded init, zero moments, t = 0, constant schedule at
// the parent's base learning rate, no widen metadata.
CandidateState scratch_large(const TrainState& parent, const ModelConfig& child_config,
                             uint64_t seed);

CandidateState build_candidate(const TrainState& parent, Recipe recipe, int64_t m, uint64_t seed,
                               double perturb_sigma = 1e-3);

// Orthogonal projection onto the inherited subspace of one tensor:
// clone-mean replaces clone groups by their mean along every widened axis,
// keep-reference zeroes everything outside the reference slice. Returns
// nullopt when the tensor has no metadata record.
template <typename T>
std::optional<Tensor<T>> project_inherited(const WidenMetadata& meta, const std::string& name,
                                           const Tensor<T>& value);

// The raw widening map on a layout-shaped tensor set, in the set's own
// precision. square_scale applies the squared per-tensor factor (the
// second-moment transport).
template <typename T>
ParamSet<T> widen_parameters(const ParamSet<T>& src, const ModelConfig& parent_config, int64_t m,
                             MapKind kind, bool square_scale = false);

}  // namespace widthlab
