// SPDX-License-Identifier: Apache-2.0
/**
 * @file   tensor.cpp
 * @brief  Memory pool materialization
 */
#include <nnplan/tensor.hpp>

#include <nnplan/error.hpp>

#include <cstdlib>
#include <cstring>
#include <new>

namespace nnplan {

AlignedBuffer::AlignedBuffer(std::size_t bytes) : size_(bytes) {
  if (bytes == 0)
    return;
  const auto rounded =
    (bytes + arena_alignment - 1) / arena_alignment * arena_alignment;
  auto *p = static_cast<std::byte *>(std::aligned_alloc(arena_alignment, rounded));
  if (!p)
    throw std::bad_alloc();
  std::memset(p, 0, rounded);
  ptr_.reset(p);
}

void AlignedBuffer::Free::operator()(std::byte *p) const noexcept {
  std::free(p);
}

Arena::Arena(const MemoryPlan &plan, std::vector<TensorSpec> tensors,
             External external) :
  plan_(plan),
  tensors_(std::make_unique<std::vector<TensorSpec>>(std::move(tensors))),
  bytes_(plan.pool_bytes) {
  for (auto &[name, buf] : external) {
    const auto &t = find_tensor(*tensors_, name);
    if (!t.is_root())
      throw PlanError("external buffer for merged tensor '" + name + "'");
    if (buf.size() < t.dim.count())
      throw PlanError("external buffer for '" + name + "' is too small");
  }

  for (auto &t : *tensors_) {
    const auto &root = root_of(*tensors_, t.name);
    std::span<float> data;
    if (auto ext = external.find(root.name); ext != external.end()) {
      data = ext->second.first(t.dim.count());
    } else {
      auto a = plan_.assignments.find(root.name);
      if (a == plan_.assignments.end())
        throw PlanError("tensor '" + root.name + "' has no assignment");
      if (a->second.offset + root.bytes() > plan_.pool_bytes)
        throw PlanError("tensor '" + root.name + "' lies outside the pool");
      auto *p = reinterpret_cast<float *>(bytes_.data() + a->second.offset);
      data = {p, t.dim.count()};
    }
    bindings_.emplace(t.name, Binding{&t, data});
  }
}

const Arena::Binding &Arena::binding(std::string_view name) const {
  auto it = bindings_.find(name);
  if (it == bindings_.end())
    throw AccessError("no tensor named '" + std::string(name) + "'");
  return it->second;
}

TensorView Arena::view(std::string_view name, int eo) const {
  const auto &b = binding(name);
  const auto &t = *b.spec;
  if (!t.persistent() && (eo < t.min_eo() || eo > t.max_eo()))
    throw AccessError("tensor '" + t.name + "' accessed at EO " +
                      std::to_string(eo) + " outside its lifetime [" +
                      std::to_string(t.min_eo()) + ", " +
                      std::to_string(t.max_eo()) + "]");
  return {b.spec, b.data};
}

std::span<float> Arena::storage(std::string_view name) const {
  return binding(name).data;
}

bool Arena::contains(std::string_view name) const {
  return bindings_.find(name) != bindings_.end();
}

Arena materialize(const MemoryPlan &plan, std::vector<TensorSpec> tensors,
                  Arena::External external) {
  auto conflicts = validate_plan(plan, tensors);
  if (!conflicts.empty()) {
    const auto &c = conflicts.front();
    throw PlanError("invalid plan: " + c.first +
                    (c.second.empty() ? "" : " / " + c.second) + ": " +
                    c.reason);
  }
  return Arena(plan, std::move(tensors), std::move(external));
}

} // namespace nnplan
