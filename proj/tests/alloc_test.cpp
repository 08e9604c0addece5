// SPDX-License-Identifier: Apache-2.0
/**
 * @file   alloc_test.cpp
 * @brief  A training iteration with swap off performs no heap allocation
 *
 * Replaces the global allocation functions with counting wrappers, so this
 * suite lives in its own executable.
 */
#include "common.hpp"

#include <nnplan/trainer.hpp>

#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <new>

namespace {
std::atomic<std::size_t> allocations{0};
}

void *operator new(std::size_t n) {
  ++allocations;
  if (void *p = std::malloc(n ? n : 1))
    return p;
  throw std::bad_alloc();
}
void *operator new[](std::size_t n) { return operator new(n); }
void *operator new(std::size_t n, std::align_val_t a) {
  ++allocations;
  const auto al = static_cast<std::size_t>(a);
  if (void *p = std::aligned_alloc(al, (n + al - 1) / al * al))
    return p;
  throw std::bad_alloc();
}
void *operator new[](std::size_t n, std::align_val_t a) { return operator new(n, a); }
void operator delete(void *p) noexcept { std::free(p); }
void operator delete[](void *p) noexcept { std::free(p); }
void operator delete(void *p, std::size_t) noexcept { std::free(p); }
void operator delete[](void *p, std::size_t) noexcept { std::free(p); }
void operator delete(void *p, std::align_val_t) noexcept { std::free(p); }
void operator delete[](void *p, std::align_val_t) noexcept { std::free(p); }
void operator delete(void *p, std::size_t, std::align_val_t) noexcept { std::free(p); }
void operator delete[](void *p, std::size_t, std::align_val_t) noexcept { std::free(p); }

using namespace nnplan;

TEST(Allocation, SwapOffIterationsDoNotAllocate) {
  for (const char *name :
       {"desk_inplace.ini", "desk_conv.ini", "desk_fc_frozen_clip.ini"}) {
    const auto g = test::model(name);
    Session s(g);
    SyntheticData data(default_synthetic(s.model()));
    BatchQueue q(data, g.hyper.batch_size);
    std::vector<float> x(g.hyper.batch_size * input_features(s.model()));
    std::vector<float> y(g.hyper.batch_size * label_features(s.model()));
    q.fill(0, x, y);
    s.run_iteration(x, y); // warm-up
    const auto before = allocations.load();
    for (int i = 0; i < 5; ++i) {
      q.fill(static_cast<std::size_t>(i), x, y);
      s.run_iteration(x, y);
    }
    EXPECT_EQ(allocations.load() - before, 0u) << name;
  }
}

TEST(Allocation, CounterSeesAllocations) {
  const auto before = allocations.load();
  auto *v = new std::vector<int>(100);
  delete v;
  EXPECT_GE(allocations.load() - before, 2u);
}
