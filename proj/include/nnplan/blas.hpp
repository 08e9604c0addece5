// SPDX-License-Identifier: Apache-2.0
/**
 * @file   blas.hpp
 * @brief  Dense float32 primitives used by the layer kernels
 *
 * All matrices are row-major with explicit leading dimensions. Reductions
 * run in a fixed order, so results are bit-reproducible for a given build.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

namespace nnplan::blas {

enum class Trans : std::uint8_t { no, yes };

/// C = alpha * op(A) * op(B) + beta * C, op(A) is M x K, op(B) is K x N.
/// beta == 0 overwrites C without reading it.
void gemm(Trans ta, Trans tb, std::size_t M, std::size_t N, std::size_t K,
          float alpha, const float *A, std::size_t lda, const float *B,
          std::size_t ldb, float beta, float *C, std::size_t ldc);

/// y += alpha * x
void axpy(float alpha, std::span<const float> x, std::span<float> y);

/// x *= alpha
void scale(float alpha, std::span<float> x);

/// out[i] = a[i] * b[i]; out may alias a or b
void mul(std::span<const float> a, std::span<const float> b,
         std::span<float> out);

/// out[i] = f(in[i]); out may alias in
template <typename F>
void map(std::span<const float> in, std::span<float> out, F &&f) {
  for (std::size_t i = 0; i < in.size(); ++i)
    out[i] = f(in[i]);
}

/// out[j] = sum over rows of the rows x cols matrix m
void reduce_rows(std::span<const float> m, std::size_t rows, std::size_t cols,
                 std::span<float> out);

/// Geometry of one batch item of a 2-D convolution.
struct ConvGeometry {
  std::size_t channels = 1, height = 1, width = 1;
  std::size_t kernel = 1, stride = 1;
  std::size_t pad_top = 0, pad_left = 0;
  std::size_t out_h = 1, out_w = 1;

  std::size_t patch_rows() const { return channels * kernel * kernel; }
  std::size_t patch_cols() const { return out_h * out_w; }

  /// out = ceil(in / stride), padding split with the extra row at the end
  static ConvGeometry same(std::size_t channels, std::size_t height,
                           std::size_t width, std::size_t kernel,
                           std::size_t stride);
  /// no padding
  static ConvGeometry valid(std::size_t channels, std::size_t height,
                            std::size_t width, std::size_t kernel,
                            std::size_t stride);
};

/// Unfolds one C x H x W image into a (C*k*k) x (out_h*out_w) patch matrix.
void im2col(std::span<const float> image, const ConvGeometry &g,
            std::span<float> col);

/// Scatter-adds a patch matrix back into a C x H x W image. The image is
/// accumulated into, not overwritten.
void col2im(std::span<const float> col, const ConvGeometry &g,
            std::span<float> image);

} // namespace nnplan::blas
