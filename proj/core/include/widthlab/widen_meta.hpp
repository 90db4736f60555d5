#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace widthlab {

enum class MapKind { kClone, kRefSlice };

// One widened tensor axis.
//
// Clone layout: a parent axis of size parent_dim is partitioned into blocks
// of `block` coordinates; the child index of (group g, clone k, offset s) is
// (g * factor + k) * block + s. block == 1 interleaves single coordinates
// (clone index fastest); block == d_head duplicates whole attention heads.
//
// Reference-slice layout: the child axis has size parent_dim * factor and
// the parent occupies the leading [0, parent_dim) slice.
struct WidenAxis {
  int axis = 0;
  int64_t parent_dim = 0;
  int64_t factor = 2;
  int64_t block = 1;

  int64_t child_dim() const { return parent_dim * factor; }
  bool operator==(const WidenAxis&) const = default;
};

struct TensorWidenRecord {
  MapKind kind = MapKind::kClone;
  std::vector<WidenAxis> axes;  // one entry per widened axis
  double scale = 1.0;           // weight scale applied by the widening map

  bool operator==(const TensorWidenRecord&) const = default;
};

// Per-tensor inherited-subspace structure for one widened child. The records
// define the projector for every covered tensor; tensors without a record
// have no inherited subspace (and no escape contribution).
struct WidenMetadata {
  std::string recipe;
  int64_t m = 2;
  double perturb_sigma = 0.0;
  std::vector<std::pair<std::string, TensorWidenRecord>> records;

  const TensorWidenRecord* find(const std::string& name) const {
    for (const auto& [n, r] : records) {
      if (n == name) return &r;
    }
    return nullptr;
  }

  bool operator==(const WidenMetadata&) const = default;
};

}  // namespace widthlab
