// SPDX-License-Identifier: Apache-2.0
/**
 * @file   planner.hpp
 * @brief  Sorting-based static memory planner over EO lifetimes
 */
#pragma once

#include <nnplan/exec_order.hpp>

#include <cstddef>
#include <map>
#include <string>
#include <vector>

namespace nnplan {

inline constexpr std::size_t arena_alignment = 64;

struct Assignment {
  std::size_t offset = 0;
  std::size_t size = 0;
};

struct MemoryPlan {
  /// root tensors only; merged tensors share their root's assignment
  std::map<std::string, Assignment> assignments;
  std::size_t pool_bytes = 0;
  std::size_t peak_live_bytes = 0;
  /// bytes of live root tensors at each EO
  std::vector<std::size_t> live_bytes_per_eo;
};

/// Tensors are visited by ascending min EO, ties by descending max EO. Each
/// one takes the offset of the first earlier tensor that died before it is
/// born, provided the bytes it needs from there fit inside the current arena
/// and no concurrently live tensor overlaps them; otherwise the arena grows.
/// Offsets are 64-byte aligned.
MemoryPlan plan_memory(const std::vector<TensorSpec> &tensors);

struct PlanConflict {
  std::string first;
  std::string second;
  std::string reason;
};

/// Pairs of lifetime-overlapping roots whose byte ranges intersect, plus any
/// root that is missing or sticks out of the pool.
std::vector<PlanConflict> validate_plan(const MemoryPlan &plan,
                                        const std::vector<TensorSpec> &tensors);

/// Fragmentation-free bound: max over EOs of the bytes live at that EO.
std::size_t peak_live_lower_bound(const std::vector<TensorSpec> &tensors);

std::vector<std::size_t> live_bytes_per_eo(const std::vector<TensorSpec> &tensors);

} // namespace nnplan
