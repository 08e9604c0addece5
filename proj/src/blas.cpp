// SPDX-License-Identifier: Apache-2.0
/**
 * @file   blas.cpp
 * @brief  Dense float32 primitives
 *
 * The gemm paths are cache-blocked on whichever operand is reused, and the
 * dot products of the NT path use eight fixed lanes so that the summation
 * order never depends on data or threading.
 */
#include <nnplan/blas.hpp>

#include <algorithm>
#include <array>
#include <cstring>
#include <stdexcept>

namespace nnplan::blas {

namespace {

constexpr std::size_t k_block = 256;
constexpr std::size_t row_block = 256;

/// C += alpha * A * B
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, float alpha,
             const float *A, std::size_t lda, const float *B, std::size_t ldb,
             float *C, std::size_t ldc) {
  for (std::size_t k0 = 0; k0 < K; k0 += k_block) {
    const std::size_t k1 = std::min(K, k0 + k_block);
    for (std::size_t i = 0; i < M; ++i) {
      float *c = C + i * ldc;
      for (std::size_t k = k0; k < k1; ++k) {
        const float a = alpha * A[i * lda + k];
        if (a == 0.0f)
          continue;
        const float *b = B + k * ldb;
        for (std::size_t j = 0; j < N; ++j)
          c[j] += a * b[j];
      }
    }
  }
}

/// C += alpha * A^T * B, A stored K x M
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, float alpha,
             const float *A, std::size_t lda, const float *B, std::size_t ldb,
             float *C, std::size_t ldc) {
  for (std::size_t k0 = 0; k0 < K; k0 += k_block) {
    const std::size_t k1 = std::min(K, k0 + k_block);
    for (std::size_t i = 0; i < M; ++i) {
      float *c = C + i * ldc;
      for (std::size_t k = k0; k < k1; ++k) {
        const float a = alpha * A[k * lda + i];
        if (a == 0.0f)
          continue;
        const float *b = B + k * ldb;
        for (std::size_t j = 0; j < N; ++j)
          c[j] += a * b[j];
      }
    }
  }
}

float dot(const float *a, const float *b, std::size_t n) {
  std::array<float, 8> acc{};
  std::size_t k = 0;
  for (; k + 8 <= n; k += 8)
    for (std::size_t u = 0; u < 8; ++u)
      acc[u] += a[k + u] * b[k + u];
  for (std::size_t u = 0; k < n; ++k, ++u)
    acc[u] += a[k] * b[k];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
         ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

/// C += alpha * A * B^T, B stored N x K
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, float alpha,
             const float *A, std::size_t lda, const float *B, std::size_t ldb,
             float *C, std::size_t ldc) {
  for (std::size_t j0 = 0; j0 < N; j0 += row_block) {
    const std::size_t j1 = std::min(N, j0 + row_block);
    for (std::size_t i = 0; i < M; ++i) {
      const float *a = A + i * lda;
      float *c = C + i * ldc;
      for (std::size_t j = j0; j < j1; ++j)
        c[j] += alpha * dot(a, B + j * ldb, K);
    }
  }
}

/// C += alpha * A^T * B^T; rare, kept simple
void gemm_tt(std::size_t M, std::size_t N, std::size_t K, float alpha,
             const float *A, std::size_t lda, const float *B, std::size_t ldb,
             float *C, std::size_t ldc) {
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      float s = 0.0f;
      for (std::size_t k = 0; k < K; ++k)
        s += A[k * lda + i] * B[j * ldb + k];
      C[i * ldc + j] += alpha * s;
    }
}

} // namespace

void gemm(Trans ta, Trans tb, std::size_t M, std::size_t N, std::size_t K,
          float alpha, const float *A, std::size_t lda, const float *B,
          std::size_t ldb, float beta, float *C, std::size_t ldc) {
  for (std::size_t i = 0; i < M; ++i) {
    float *c = C + i * ldc;
    if (beta == 0.0f)
      std::fill(c, c + N, 0.0f);
    else if (beta != 1.0f)
      for (std::size_t j = 0; j < N; ++j)
        c[j] *= beta;
  }
  if (K == 0 || alpha == 0.0f)
    return;
  if (ta == Trans::no && tb == Trans::no)
    gemm_nn(M, N, K, alpha, A, lda, B, ldb, C, ldc);
  else if (ta == Trans::yes && tb == Trans::no)
    gemm_tn(M, N, K, alpha, A, lda, B, ldb, C, ldc);
  else if (ta == Trans::no)
    gemm_nt(M, N, K, alpha, A, lda, B, ldb, C, ldc);
  else
    gemm_tt(M, N, K, alpha, A, lda, B, ldb, C, ldc);
}

void axpy(float alpha, std::span<const float> x, std::span<float> y) {
  if (x.size() != y.size())
    throw std::invalid_argument("axpy: size mismatch");
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] += alpha * x[i];
}

void scale(float alpha, std::span<float> x) {
  for (auto &v : x)
    v *= alpha;
}

void mul(std::span<const float> a, std::span<const float> b,
         std::span<float> out) {
  if (a.size() != b.size() || a.size() != out.size())
    throw std::invalid_argument("mul: size mismatch");
  for (std::size_t i = 0; i < a.size(); ++i)
    out[i] = a[i] * b[i];
}

void reduce_rows(std::span<const float> m, std::size_t rows, std::size_t cols,
                 std::span<float> out) {
  if (m.size() < rows * cols || out.size() < cols)
    throw std::invalid_argument("reduce_rows: size mismatch");
  std::fill(out.begin(), out.begin() + cols, 0.0f);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out[c] += m[r * cols + c];
}

ConvGeometry ConvGeometry::same(std::size_t channels, std::size_t height,
                                std::size_t width, std::size_t kernel,
                                std::size_t stride) {
  if (kernel == 0 || stride == 0)
    throw std::invalid_argument("conv geometry: kernel and stride must be > 0");
  ConvGeometry g;
  g.channels = channels;
  g.height = height;
  g.width = width;
  g.kernel = kernel;
  g.stride = stride;
  g.out_h = (height + stride - 1) / stride;
  g.out_w = (width + stride - 1) / stride;
  auto pad = [&](std::size_t out, std::size_t in) {
    const std::size_t need = (out - 1) * stride + kernel;
    return need > in ? (need - in) / 2 : 0;
  };
  g.pad_top = pad(g.out_h, height);
  g.pad_left = pad(g.out_w, width);
  return g;
}

ConvGeometry ConvGeometry::valid(std::size_t channels, std::size_t height,
                                 std::size_t width, std::size_t kernel,
                                 std::size_t stride) {
  if (kernel == 0 || stride == 0)
    throw std::invalid_argument("conv geometry: kernel and stride must be > 0");
  if (kernel > height || kernel > width)
    throw std::invalid_argument("conv geometry: kernel larger than input");
  ConvGeometry g;
  g.channels = channels;
  g.height = height;
  g.width = width;
  g.kernel = kernel;
  g.stride = stride;
  g.out_h = (height - kernel) / stride + 1;
  g.out_w = (width - kernel) / stride + 1;
  return g;
}

void im2col(std::span<const float> image, const ConvGeometry &g,
            std::span<float> col) {
  const std::size_t P = g.patch_cols();
  if (image.size() < g.channels * g.height * g.width ||
      col.size() < g.patch_rows() * P)
    throw std::invalid_argument("im2col: buffer too small");
  const auto H = static_cast<std::ptrdiff_t>(g.height);
  const auto W = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        float *row = col.data() + ((c * g.kernel + ky) * g.kernel + kx) * P;
        const float *plane = image.data() + c * g.height * g.width;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                         static_cast<std::ptrdiff_t>(g.pad_top);
          float *out = row + oy * g.out_w;
          if (y < 0 || y >= H) {
            std::fill(out, out + g.out_w, 0.0f);
            continue;
          }
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto x = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                           static_cast<std::ptrdiff_t>(g.pad_left);
            out[ox] = (x < 0 || x >= W) ? 0.0f : plane[y * W + x];
          }
        }
      }
}

void col2im(std::span<const float> col, const ConvGeometry &g,
            std::span<float> image) {
  const std::size_t P = g.patch_cols();
  if (image.size() < g.channels * g.height * g.width ||
      col.size() < g.patch_rows() * P)
    throw std::invalid_argument("col2im: buffer too small");
  const auto H = static_cast<std::ptrdiff_t>(g.height);
  const auto W = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const float *row =
          col.data() + ((c * g.kernel + ky) * g.kernel + kx) * P;
        float *plane = image.data() + c * g.height * g.width;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                         static_cast<std::ptrdiff_t>(g.pad_top);
          if (y < 0 || y >= H)
            continue;
          const float *in = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto x = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                           static_cast<std::ptrdiff_t>(g.pad_left);
            if (x >= 0 && x < W)
              plane[y * W + x] += in[ox];
          }
        }
      }
}

} // namespace nnplan::blas
