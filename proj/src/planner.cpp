// SPDX-License-Identifier: Apache-2.0
/**
 * @file   planner.cpp
 * @brief  Sorting-based static memory planner
 */
#include <nnplan/planner.hpp>

#include <nnplan/error.hpp>

#include <algorithm>
#include <numeric>
#include <optional>

namespace nnplan {

namespace {

std::size_t align_up(std::size_t v) {
  return (v + arena_alignment - 1) / arena_alignment * arena_alignment;
}

bool overlaps(std::size_t a_off, std::size_t a_size, std::size_t b_off,
              std::size_t b_size) {
  return a_off < b_off + b_size && b_off < a_off + a_size;
}

std::vector<const TensorSpec *> roots(const std::vector<TensorSpec> &tensors) {
  std::vector<const TensorSpec *> out;
  for (auto &t : tensors)
    if (t.is_root())
      out.push_back(&t);
  return out;
}

} // namespace

std::vector<std::size_t> live_bytes_per_eo(const std::vector<TensorSpec> &tensors) {
  int last = -1;
  for (auto *t : roots(tensors)) {
    if (t->eos.empty())
      throw PlanError("tensor '" + t->name + "' has no execution order");
    last = std::max(last, t->max_eo());
  }
  std::vector<std::size_t> live(static_cast<std::size_t>(last + 1), 0);
  for (auto *t : roots(tensors))
    for (int eo = t->min_eo(); eo <= t->max_eo(); ++eo)
      live[static_cast<std::size_t>(eo)] += t->bytes();
  return live;
}

std::size_t peak_live_lower_bound(const std::vector<TensorSpec> &tensors) {
  auto live = live_bytes_per_eo(tensors);
  return live.empty() ? 0 : *std::max_element(live.begin(), live.end());
}

MemoryPlan plan_memory(const std::vector<TensorSpec> &tensors) {
  auto order = roots(tensors);
  for (auto *t : order)
    if (t->eos.empty())
      throw PlanError("tensor '" + t->name + "' has no execution order");

  std::stable_sort(order.begin(), order.end(), [](auto *a, auto *b) {
    if (a->min_eo() != b->min_eo())
      return a->min_eo() < b->min_eo();
    return a->max_eo() > b->max_eo();
  });

  struct Placed {
    const TensorSpec *spec;
    std::size_t offset;
  };
  std::vector<Placed> placed;
  placed.reserve(order.size());

  MemoryPlan plan;
  std::size_t end = 0;
  for (auto *t : order) {
    const auto size = t->bytes();
    const int born = t->min_eo(), dies = t->max_eo();

    auto region_free = [&](std::size_t off) {
      for (auto &p : placed) {
        if (p.spec->max_eo() < born || p.spec->min_eo() > dies)
          continue;
        if (overlaps(off, size, p.offset, p.spec->bytes()))
          return false;
      }
      return true;
    };

    // A dead tensor's offset is reusable when the bytes from there up to
    // the needed size lie inside the arena and are not claimed by any
    // tensor that is live at the same time. The region may span several
    // adjacent dead tensors but never grows the arena.
    std::optional<std::size_t> offset;
    for (auto &cand : placed) {
      if (cand.spec->max_eo() >= born)
        continue;
      if (cand.offset + size > end)
        continue;
      if (region_free(cand.offset)) {
        offset = cand.offset;
        break;
      }
    }
    if (!offset) {
      offset = align_up(end);
      end = *offset + size;
    }
    placed.push_back({t, *offset});
    plan.assignments[t->name] = {*offset, size};
  }

  plan.pool_bytes = end;
  plan.live_bytes_per_eo = live_bytes_per_eo(tensors);
  plan.peak_live_bytes =
    plan.live_bytes_per_eo.empty()
      ? 0
      : *std::max_element(plan.live_bytes_per_eo.begin(),
                          plan.live_bytes_per_eo.end());
  return plan;
}

std::vector<PlanConflict> validate_plan(const MemoryPlan &plan,
                                        const std::vector<TensorSpec> &tensors) {
  std::vector<PlanConflict> out;
  auto rs = roots(tensors);
  for (auto *t : rs) {
    auto it = plan.assignments.find(t->name);
    if (it == plan.assignments.end()) {
      out.push_back({t->name, {}, "not assigned"});
      continue;
    }
    if (it->second.size < t->bytes())
      out.push_back({t->name, {}, "assignment smaller than tensor"});
    if (it->second.offset + it->second.size > plan.pool_bytes)
      out.push_back({t->name, {}, "outside the pool"});
  }
  for (std::size_t a = 0; a < rs.size(); ++a) {
    auto ia = plan.assignments.find(rs[a]->name);
    if (ia == plan.assignments.end())
      continue;
    for (std::size_t b = a + 1; b < rs.size(); ++b) {
      auto ib = plan.assignments.find(rs[b]->name);
      if (ib == plan.assignments.end())
        continue;
      bool live_together = rs[a]->min_eo() <= rs[b]->max_eo() &&
                           rs[b]->min_eo() <= rs[a]->max_eo();
      if (live_together && overlaps(ia->second.offset, ia->second.size,
                                    ib->second.offset, ib->second.size))
        out.push_back({rs[a]->name, rs[b]->name,
                       "byte ranges overlap while both are live"});
    }
  }
  return out;
}

} // namespace nnplan
