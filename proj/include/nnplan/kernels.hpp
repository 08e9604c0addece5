// SPDX-License-Identifier: Apache-2.0
/**
 * @file   kernels.hpp
 * @brief  Forward, gradient, derivative and update kernels of every layer
 *
 * Kernels work on plain spans. Outputs are always overwritten, never
 * accumulated into, so a stale buffer (reused arena slot, swapped-in garbage)
 * cannot leak into results. In-place layers accept aliased input and output.
 */
#pragma once

#include <nnplan/blas.hpp>
#include <nnplan/graph.hpp>

#include <cstdint>
#include <span>

namespace nnplan::kernels {

struct LinearShape {
  std::size_t batch = 1, in = 1, out = 1;
};

/// y = x * W[0:in] + W[in]
void linear_forward(std::span<const float> x, std::span<const float> w,
                    std::span<float> y, const LinearShape &s);
/// dW[0:in] = x^T * d, dW[in] = sum over batch of d
void linear_gradient(std::span<const float> x, std::span<const float> d,
                     std::span<float> dw, const LinearShape &s);
/// dx = d * W[0:in]^T
void linear_derivative(std::span<const float> d, std::span<const float> w,
                       std::span<float> dx, const LinearShape &s);

/// Per batch item: y_b = W[:, 0:CKK] * im2col(x_b) + W[:, CKK]
void conv_forward(std::span<const float> x, std::span<const float> w,
                  std::span<float> y, std::size_t batch, std::size_t filters,
                  const blas::ConvGeometry &g, std::span<float> col);
void conv_gradient(std::span<const float> x, std::span<const float> d,
                   std::span<float> dw, std::size_t batch, std::size_t filters,
                   const blas::ConvGeometry &g, std::span<float> col);
void conv_derivative(std::span<const float> d, std::span<const float> w,
                     std::span<float> dx, std::size_t batch,
                     std::size_t filters, const blas::ConvGeometry &g,
                     std::span<float> col);

void sigmoid_forward(std::span<const float> x, std::span<float> y);
/// dx = d * y * (1 - y), y being the forward output
void sigmoid_derivative(std::span<const float> y, std::span<const float> d,
                        std::span<float> dx);

void relu_forward(std::span<const float> x, std::span<float> y);
/// dx = d where y > 0, else 0 (the derivative at 0 is taken as 0)
void relu_derivative(std::span<const float> y, std::span<const float> d,
                     std::span<float> dx);

/// Copies unless the buffers already alias (merged view).
void copy_view(std::span<const float> from, std::span<float> to);

/// mean((x - y)^2)
float mse_forward(std::span<const float> x, std::span<const float> y);
/// dx = 2 (x - y) / n
void mse_derivative(std::span<const float> x, std::span<const float> y,
                    std::span<float> dx);

/// w -= lr * dw
void sgd_apply(std::span<float> w, std::span<const float> dw, float lr);

/// Global L2 norm over all gradients, accumulated in double.
double global_norm(std::span<const std::span<float>> grads);

/// Scales every gradient by max_norm / g when g > max_norm. Returns g.
double clip_global_norm(std::span<const std::span<float>> grads,
                        double max_norm);

/// Deterministic generator shared by weight init and synthetic data.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next();
  /// [0, 1) with 24 random bits
  float uniform();
  /// standard normal (Box-Muller)
  float normal();

private:
  std::uint64_t state_;
};

/// Xavier-uniform weights, zero bias, drawn from a generator seeded with
/// (seed, layer_index).
void init_weights(const LayerNode &node, const Dim4 &input,
                  std::uint64_t seed, std::size_t layer_index,
                  std::span<float> w);

} // namespace nnplan::kernels
