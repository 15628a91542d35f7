#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hwbd/error.hpp"

namespace hwbd {

enum class ReductionTree { Sequential, Pairwise, Blocked };
enum class Accumulator { F32, F64 };
enum class BatchTiling { PerRow, Interleaved };

/// A virtual hardware platform: the complete rounding behavior of every kernel.
///
/// Reduction order contract:
///  - Sequential: ((t0 + t1) + t2) + ...
///  - Pairwise:   balanced binary tree; a range of n terms splits into ceil(n/2) | floor(n/2).
///  - Blocked:    each run of `block_size` terms is summed sequentially, then the block
///                partials are combined sequentially by plain addition (a one-term block
///                contributes its rounded product).
/// With `fma`, an addition whose right operand is a single product term is fused
/// (one rounding); otherwise the product is rounded to the accumulator first.
/// F64 accumulators keep partials in double and round to float once at the end.
/// Interleaved batch tiling makes the reduction order depend on the batch item index
/// and batch size; see `TileContext`.
struct BackendProfile {
  std::string name;
  std::size_t block_size = 1;
  ReductionTree tree = ReductionTree::Sequential;
  bool fma = false;
  Accumulator accumulator = Accumulator::F32;
  BatchTiling batch_tiling = BatchTiling::PerRow;

  /// True when both profiles round every kernel identically, whatever their names.
  bool same_numerics(const BackendProfile& other) const noexcept {
    return block_size == other.block_size && tree == other.tree && fma == other.fma &&
           accumulator == other.accumulator && batch_tiling == other.batch_tiling;
  }

  void validate() const {
    if (name.empty()) throw ConfigError("backend profile needs a name");
    if (block_size < 1) throw ConfigError("profile '" + name + "': block_size must be >= 1");
  }
};

inline std::string_view to_string(ReductionTree t) {
  switch (t) {
    case ReductionTree::Sequential: return "sequential";
    case ReductionTree::Pairwise: return "pairwise";
    case ReductionTree::Blocked: return "blocked";
  }
  return "?";
}

inline std::string_view to_string(Accumulator a) { return a == Accumulator::F32 ? "f32" : "f64"; }

inline std::string_view to_string(BatchTiling b) {
  return b == BatchTiling::PerRow ? "per-row" : "interleaved";
}

inline ReductionTree parse_tree(std::string_view s) {
  if (s == "sequential") return ReductionTree::Sequential;
  if (s == "pairwise") return ReductionTree::Pairwise;
  if (s == "blocked") return ReductionTree::Blocked;
  throw ConfigError("unknown reduction tree '" + std::string(s) + "'");
}

inline Accumulator parse_accumulator(std::string_view s) {
  if (s == "f32") return Accumulator::F32;
  if (s == "f64") return Accumulator::F64;
  throw ConfigError("unknown accumulator '" + std::string(s) + "'");
}

inline BatchTiling parse_batch_tiling(std::string_view s) {
  if (s == "per-row") return BatchTiling::PerRow;
  if (s == "interleaved") return BatchTiling::Interleaved;
  throw ConfigError("unknown batch tiling '" + std::string(s) + "'");
}

/// Name of the high-precision profile used for gradients and training.
inline constexpr std::string_view kCanonicalProfile = "reference-f64";

/// Built-in platforms. `blocked16-fma` and `blocked16-fma-mig` are numerically identical
/// (the bit-identical pair); every other pair deviates.
inline std::vector<BackendProfile> builtin_profiles() {
  using RT = ReductionTree;
  return {
      {"reference-f64", 1, RT::Sequential, false, Accumulator::F64, BatchTiling::PerRow},
      {"seq-f32", 1, RT::Sequential, false, Accumulator::F32, BatchTiling::PerRow},
      {"pairwise-f32", 1, RT::Pairwise, false, Accumulator::F32, BatchTiling::PerRow},
      {"blocked16-fma", 16, RT::Blocked, true, Accumulator::F32, BatchTiling::Interleaved},
      {"blocked16-fma-mig", 16, RT::Blocked, true, Accumulator::F32, BatchTiling::Interleaved},
      {"blocked32-fma", 32, RT::Blocked, true, Accumulator::F32, BatchTiling::Interleaved},
      {"blocked8-f32", 8, RT::Blocked, false, Accumulator::F32, BatchTiling::PerRow},
  };
}

/// Name-addressable set of profiles.
class ProfileRegistry {
 public:
  ProfileRegistry() {
    for (auto& p : builtin_profiles()) add(std::move(p));
  }

  /// Adds or replaces a profile.
  void add(BackendProfile profile) {
    profile.validate();
    auto name = profile.name;
    profiles_.insert_or_assign(std::move(name), std::move(profile));
  }

  const BackendProfile& get(const std::string& name) const {
    auto it = profiles_.find(name);
    if (it == profiles_.end()) throw ConfigError("unknown backend profile '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return profiles_.count(name) != 0; }

  const BackendProfile& canonical() const { return get(std::string(kCanonicalProfile)); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : profiles_) out.push_back(name);
    return out;
  }

 private:
  std::map<std::string, BackendProfile> profiles_;
};

}  // namespace hwbd
