// SPDX-License-Identifier: Apache-2.0
/**
 * @file   tensor.hpp
 * @brief  Memory pool materialization and per-EO tensor views
 */
#pragma once

#include <nnplan/planner.hpp>

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace nnplan {

struct TensorView {
  const TensorSpec *spec = nullptr;
  std::span<float> data;

  const Dim4 &dim() const { return spec->dim; }
  const std::string &name() const { return spec->name; }
};

/// 64-byte aligned, zero-initialized heap block.
class AlignedBuffer {
public:
  AlignedBuffer() = default;
  explicit AlignedBuffer(std::size_t bytes);

  std::byte *data() noexcept { return ptr_.get(); }
  const std::byte *data() const noexcept { return ptr_.get(); }
  std::size_t size() const noexcept { return size_; }
  std::span<float> floats() noexcept {
    return {reinterpret_cast<float *>(data()), size_ / sizeof(float)};
  }

private:
  struct Free {
    void operator()(std::byte *p) const noexcept;
  };
  std::unique_ptr<std::byte, Free> ptr_;
  std::size_t size_ = 0;
};

/**
 * The memory pool of one training session. Every tensor, merged or not, is
 * bound once at construction to its root's offset, so resolving a view never
 * allocates.
 */
class Arena {
public:
  /// Buffers owned by the caller that replace arena slots (P tensors).
  using External = std::map<std::string, std::span<float>, std::less<>>;

  Arena(const MemoryPlan &plan, std::vector<TensorSpec> tensors,
        External external = {});

  Arena(Arena &&) noexcept = default;
  Arena &operator=(Arena &&) noexcept = default;
  Arena(const Arena &) = delete;
  Arena &operator=(const Arena &) = delete;

  /// Throws AccessError when `eo` lies outside the tensor's own lifetime.
  /// Persistent tensors are valid at every EO.
  TensorView view(std::string_view name, int eo) const;

  /// Raw storage, no lifetime check (data loading, weight export).
  std::span<float> storage(std::string_view name) const;

  bool contains(std::string_view name) const;
  std::size_t pool_bytes() const noexcept { return plan_.pool_bytes; }
  const std::byte *base() const noexcept { return bytes_.data(); }
  const MemoryPlan &plan() const noexcept { return plan_; }
  const std::vector<TensorSpec> &tensors() const noexcept { return *tensors_; }

private:
  struct Binding {
    const TensorSpec *spec;
    std::span<float> data;
  };
  const Binding &binding(std::string_view name) const;

  MemoryPlan plan_;
  std::unique_ptr<std::vector<TensorSpec>> tensors_;
  AlignedBuffer bytes_;
  std::map<std::string, Binding, std::less<>> bindings_;
};

/// Validates the plan and builds the arena.
Arena materialize(const MemoryPlan &plan, std::vector<TensorSpec> tensors,
                  Arena::External external = {});

} // namespace nnplan
