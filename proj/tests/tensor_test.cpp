// SPDX-License-Identifier: Apache-2.0
/**
 * @file   tensor_test.cpp
 * @brief  Arena views, lifetime checks and the dense primitives
 */
#include "common.hpp"

#include <nnplan/blas.hpp>
#include <nnplan/error.hpp>
#include <nnplan/tensor.hpp>
#include <nnplan/trainer.hpp>

#include <gtest/gtest.h>

#include <random>

using namespace nnplan;

namespace {

CompiledModel walk_linear3() {
  return compile(test::model("walk_linear3.ini"),
                 {.merge = true, .require_loss = false});
}

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> d(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (auto &x : v)
    x = d(rng);
  return v;
}

/// Naive row-major reference for every transpose combination.
std::vector<double> naive_gemm(bool ta, bool tb, std::size_t M, std::size_t N,
                               std::size_t K, const std::vector<float> &A,
                               const std::vector<float> &B) {
  std::vector<double> C(M * N);
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < K; ++k)
        s += double(ta ? A[k * M + i] : A[i * K + k]) *
             double(tb ? B[j * K + k] : B[k * N + j]);
      C[i * N + j] = s;
    }
  return C;
}

} // namespace

TEST(Arena, SharedOffsetGivesSameAddress) {
  const auto m = walk_linear3();
  const auto arena = materialize(m.memory, m.tensors);
  const auto d3 = arena.view("D3", 3);
  const auto x3 = arena.view("X3", 2);
  EXPECT_EQ(d3.data.data(), x3.data.data());
  EXPECT_EQ(arena.pool_bytes(), m.memory.pool_bytes);
}

TEST(Arena, MergedViewsAlias) {
  const auto m = compile(test::model("walk_inplace.ini"),
                         {.merge = true, .require_loss = false});
  const auto arena = materialize(m.memory, m.tensors);
  auto x1 = arena.view("X1", 0);
  auto x3 = arena.view("X3", 2);
  EXPECT_EQ(x1.data.data(), x3.data.data());
  x3.data[5] = 42.0f; // write through the view, read through the producer
  EXPECT_EQ(x1.data[5], 42.0f);
}

TEST(Arena, PersistentWeightsValidAtAnyOrder) {
  const auto m = walk_linear3();
  const auto arena = materialize(m.memory, m.tensors);
  for (int eo = 0; eo < m.plan.eo_max; ++eo)
    EXPECT_NO_THROW(arena.view("W0", eo));
}

TEST(Arena, OutOfLifetimeAccessRejected) {
  const auto m = walk_linear3();
  const auto arena = materialize(m.memory, m.tensors);
  EXPECT_FALSE(find_tensor(m.tensors, "dW2").eos.count(0));
  EXPECT_THROW(arena.view("dW2", 0), AccessError);
  EXPECT_THROW(arena.view("missing", 0), AccessError);
}

TEST(Arena, ExternalBuffersReplaceSlots) {
  const auto m = walk_linear3();
  std::vector<float> batch(find_tensor(m.tensors, "X0").dim.count(), 3.0f);
  const auto arena = materialize(m.memory, m.tensors, {{"X0", batch}});
  EXPECT_EQ(arena.view("X0", 0).data.data(), batch.data());
}

TEST(Arena, ConflictingPlanRejected) {
  const auto m = walk_linear3();
  auto bad = m.memory;
  bad.assignments.at("X1").offset = bad.assignments.at("X0").offset;
  EXPECT_THROW(materialize(bad, m.tensors), PlanError);
}

TEST(Arena, BufferIsAligned) {
  AlignedBuffer b(100);
  EXPECT_EQ(reinterpret_cast<std::uintptr_t>(b.data()) % 64, 0u);
  for (float f : b.floats())
    EXPECT_EQ(f, 0.0f);
}

TEST(Blas, IdentityTimesMatrix) {
  const std::size_t n = 5, m = 7;
  std::vector<float> I(n * n, 0.0f);
  for (std::size_t i = 0; i < n; ++i)
    I[i * n + i] = 1.0f;
  const auto A = random_vec(n * m, 1);
  std::vector<float> C(n * m, -1.0f);
  blas::gemm(blas::Trans::no, blas::Trans::no, n, m, n, 1.0f, I.data(), n,
             A.data(), m, 0.0f, C.data(), m);
  EXPECT_EQ(C, A);
}

TEST(Blas, AllTransposesMatchNaive) {
  const std::size_t M = 37, N = 29, K = 300;
  const auto A = random_vec(M * K, 2), B = random_vec(K * N, 3);
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      std::vector<float> C(M * N, 0.5f);
      blas::gemm(ta ? blas::Trans::yes : blas::Trans::no,
                 tb ? blas::Trans::yes : blas::Trans::no, M, N, K, 2.0f,
                 A.data(), ta ? M : K, B.data(), tb ? K : N, 1.0f, C.data(), N);
      const auto want = naive_gemm(ta, tb, M, N, K, A, B);
      for (std::size_t i = 0; i < C.size(); ++i)
        ASSERT_NEAR(C[i], 2.0 * want[i] + 0.5, 1e-4) << ta << tb << " " << i;
    }
}

TEST(Blas, AxpyZeroAlphaIsNoop) {
  const auto x = random_vec(10, 4);
  auto y = random_vec(10, 5);
  const auto keep = y;
  blas::axpy(0.0f, x, y);
  EXPECT_EQ(y, keep);
  blas::axpy(2.0f, x, y);
  for (std::size_t i = 0; i < y.size(); ++i)
    EXPECT_FLOAT_EQ(y[i], keep[i] + 2.0f * x[i]);
}

TEST(Blas, ReduceRows) {
  const std::vector<float> m = {1, 2, 3, 4, 5, 6};
  std::vector<float> out(3);
  blas::reduce_rows(m, 2, 3, out);
  EXPECT_EQ(out, (std::vector<float>{5, 7, 9}));
}

TEST(Blas, Im2colBruteForce) {
  // 1 channel, 3x3 input, 2x2 kernel, stride 1, no padding
  const std::vector<float> x = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  const auto g = blas::ConvGeometry::valid(1, 3, 3, 2, 1);
  ASSERT_EQ(g.patch_rows(), 4u);
  ASSERT_EQ(g.patch_cols(), 4u);
  std::vector<float> col(16);
  blas::im2col(x, g, col);
  for (std::size_t ky = 0; ky < 2; ++ky)
    for (std::size_t kx = 0; kx < 2; ++kx)
      for (std::size_t oy = 0; oy < 2; ++oy)
        for (std::size_t ox = 0; ox < 2; ++ox)
          EXPECT_EQ(col[(ky * 2 + kx) * 4 + oy * 2 + ox],
                    x[(oy + ky) * 3 + ox + kx]);

  // scatter-adding a matrix of ones counts how many patches cover a pixel
  std::vector<float> ones(16, 1.0f), counts(9, 0.0f);
  blas::col2im(ones, g, counts);
  EXPECT_EQ(counts, (std::vector<float>{1, 2, 1, 2, 4, 2, 1, 2, 1}));
}

TEST(Blas, SamePaddingGeometry) {
  const auto g = blas::ConvGeometry::same(3, 32, 32, 3, 1);
  EXPECT_EQ(g.out_h, 32u);
  EXPECT_EQ(g.pad_top, 1u);
  const auto s2 = blas::ConvGeometry::same(3, 224, 224, 3, 2);
  EXPECT_EQ(s2.out_h, 112u);
  EXPECT_EQ(s2.pad_top, 0u); // total padding 1 goes to the far edge
}
