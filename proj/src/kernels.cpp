// SPDX-License-Identifier: Apache-2.0
/**
 * @file   kernels.cpp
 * @brief  Layer kernels, loss, SGD, clipping and weight init
 */
#include <nnplan/kernels.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <stdexcept>
#include <string>

namespace nnplan::kernels {

namespace {

void expect(std::size_t have, std::size_t want, const char *what) {
  if (have != want)
    throw std::invalid_argument(std::string(what) + ": expected " +
                                std::to_string(want) + " elements, got " +
                                std::to_string(have));
}

} // namespace

void linear_forward(std::span<const float> x, std::span<const float> w,
                    std::span<float> y, const LinearShape &s) {
  expect(x.size(), s.batch * s.in, "linear input");
  expect(w.size(), (s.in + 1) * s.out, "linear weight");
  expect(y.size(), s.batch * s.out, "linear output");
  const float *bias = w.data() + s.in * s.out;
  for (std::size_t b = 0; b < s.batch; ++b)
    std::memcpy(y.data() + b * s.out, bias, s.out * sizeof(float));
  blas::gemm(blas::Trans::no, blas::Trans::no, s.batch, s.out, s.in, 1.0f,
             x.data(), s.in, w.data(), s.out, 1.0f, y.data(), s.out);
}

void linear_gradient(std::span<const float> x, std::span<const float> d,
                     std::span<float> dw, const LinearShape &s) {
  expect(x.size(), s.batch * s.in, "linear input");
  expect(d.size(), s.batch * s.out, "linear derivative");
  expect(dw.size(), (s.in + 1) * s.out, "linear gradient");
  blas::gemm(blas::Trans::yes, blas::Trans::no, s.in, s.out, s.batch, 1.0f,
             x.data(), s.in, d.data(), s.out, 0.0f, dw.data(), s.out);
  blas::reduce_rows(d, s.batch, s.out, dw.subspan(s.in * s.out));
}

void linear_derivative(std::span<const float> d, std::span<const float> w,
                       std::span<float> dx, const LinearShape &s) {
  expect(d.size(), s.batch * s.out, "linear derivative");
  expect(w.size(), (s.in + 1) * s.out, "linear weight");
  expect(dx.size(), s.batch * s.in, "linear input derivative");
  blas::gemm(blas::Trans::no, blas::Trans::yes, s.batch, s.in, s.out, 1.0f,
             d.data(), s.out, w.data(), s.out, 0.0f, dx.data(), s.in);
}

namespace {

void check_conv(std::size_t x, std::size_t w, std::size_t y, std::size_t col,
                std::size_t batch, std::size_t filters,
                const blas::ConvGeometry &g) {
  expect(x, batch * g.channels * g.height * g.width, "conv input");
  expect(w, filters * (g.patch_rows() + 1), "conv weight");
  expect(y, batch * filters * g.patch_cols(), "conv output");
  if (col < g.patch_rows() * g.patch_cols())
    throw std::invalid_argument("conv: im2col scratch too small");
}

} // namespace

void conv_forward(std::span<const float> x, std::span<const float> w,
                  std::span<float> y, std::size_t batch, std::size_t filters,
                  const blas::ConvGeometry &g, std::span<float> col) {
  check_conv(x.size(), w.size(), y.size(), col.size(), batch, filters, g);
  const std::size_t in_n = g.channels * g.height * g.width;
  const std::size_t P = g.patch_cols(), R = g.patch_rows();
  for (std::size_t b = 0; b < batch; ++b) {
    float *yb = y.data() + b * filters * P;
    for (std::size_t f = 0; f < filters; ++f)
      std::fill(yb + f * P, yb + (f + 1) * P, w[f * (R + 1) + R]);
    blas::im2col(x.subspan(b * in_n, in_n), g, col);
    blas::gemm(blas::Trans::no, blas::Trans::no, filters, P, R, 1.0f,
               w.data(), R + 1, col.data(), P, 1.0f, yb, P);
  }
}

void conv_gradient(std::span<const float> x, std::span<const float> d,
                   std::span<float> dw, std::size_t batch, std::size_t filters,
                   const blas::ConvGeometry &g, std::span<float> col) {
  check_conv(x.size(), dw.size(), d.size(), col.size(), batch, filters, g);
  const std::size_t in_n = g.channels * g.height * g.width;
  const std::size_t P = g.patch_cols(), R = g.patch_rows();
  std::fill(dw.begin(), dw.end(), 0.0f);
  for (std::size_t b = 0; b < batch; ++b) {
    const float *db = d.data() + b * filters * P;
    blas::im2col(x.subspan(b * in_n, in_n), g, col);
    blas::gemm(blas::Trans::no, blas::Trans::yes, filters, R, P, 1.0f, db, P,
               col.data(), P, 1.0f, dw.data(), R + 1);
    for (std::size_t f = 0; f < filters; ++f) {
      float s = 0.0f;
      for (std::size_t p = 0; p < P; ++p)
        s += db[f * P + p];
      dw[f * (R + 1) + R] += s;
    }
  }
}

void conv_derivative(std::span<const float> d, std::span<const float> w,
                     std::span<float> dx, std::size_t batch,
                     std::size_t filters, const blas::ConvGeometry &g,
                     std::span<float> col) {
  check_conv(dx.size(), w.size(), d.size(), col.size(), batch, filters, g);
  const std::size_t in_n = g.channels * g.height * g.width;
  const std::size_t P = g.patch_cols(), R = g.patch_rows();
  std::fill(dx.begin(), dx.end(), 0.0f);
  for (std::size_t b = 0; b < batch; ++b) {
    blas::gemm(blas::Trans::yes, blas::Trans::no, R, P, filters, 1.0f,
               w.data(), R + 1, d.data() + b * filters * P, P, 0.0f,
               col.data(), P);
    blas::col2im(col, g, dx.subspan(b * in_n, in_n));
  }
}

void sigmoid_forward(std::span<const float> x, std::span<float> y) {
  expect(y.size(), x.size(), "sigmoid");
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = 1.0f / (1.0f + std::exp(-x[i]));
}

void sigmoid_derivative(std::span<const float> y, std::span<const float> d,
                        std::span<float> dx) {
  expect(d.size(), y.size(), "sigmoid derivative");
  expect(dx.size(), y.size(), "sigmoid derivative");
  for (std::size_t i = 0; i < y.size(); ++i)
    dx[i] = d[i] * (y[i] * (1.0f - y[i]));
}

void relu_forward(std::span<const float> x, std::span<float> y) {
  expect(y.size(), x.size(), "relu");
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_derivative(std::span<const float> y, std::span<const float> d,
                     std::span<float> dx) {
  expect(d.size(), y.size(), "relu derivative");
  expect(dx.size(), y.size(), "relu derivative");
  for (std::size_t i = 0; i < y.size(); ++i)
    dx[i] = y[i] > 0.0f ? d[i] : 0.0f;
}

void copy_view(std::span<const float> from, std::span<float> to) {
  expect(to.size(), from.size(), "view");
  if (from.data() != to.data())
    std::memcpy(to.data(), from.data(), from.size() * sizeof(float));
}

float mse_forward(std::span<const float> x, std::span<const float> y) {
  expect(y.size(), x.size(), "mse label");
  if (x.empty())
    return 0.0f;
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = static_cast<double>(x[i]) - y[i];
    s += e * e;
  }
  return static_cast<float>(s / static_cast<double>(x.size()));
}

void mse_derivative(std::span<const float> x, std::span<const float> y,
                    std::span<float> dx) {
  expect(y.size(), x.size(), "mse label");
  expect(dx.size(), x.size(), "mse derivative");
  const float k = 2.0f / static_cast<float>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    dx[i] = k * (x[i] - y[i]);
}

void sgd_apply(std::span<float> w, std::span<const float> dw, float lr) {
  expect(dw.size(), w.size(), "sgd");
  blas::axpy(-lr, dw, w);
}

double global_norm(std::span<const std::span<float>> grads) {
  double s = 0.0;
  for (auto g : grads)
    for (float v : g)
      s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

double clip_global_norm(std::span<const std::span<float>> grads,
                        double max_norm) {
  if (!(max_norm > 0.0))
    throw std::invalid_argument("clip: max_norm must be positive");
  const double g = global_norm(grads);
  if (g > max_norm) {
    const double k = max_norm / g;
    for (auto grad : grads)
      for (float &v : grad)
        v = static_cast<float>(v * k);
  }
  return g;
}

std::uint64_t Rng::next() {
  // splitmix64
  std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

float Rng::uniform() {
  return static_cast<float>(next() >> 40) * (1.0f / 16777216.0f);
}

float Rng::normal() {
  float u1 = uniform();
  while (u1 <= 0.0f)
    u1 = uniform();
  const float u2 = uniform();
  return std::sqrt(-2.0f * std::log(u1)) *
         std::cos(2.0f * std::numbers::pi_v<float> * u2);
}

void init_weights(const LayerNode &node, const Dim4 &input,
                  std::uint64_t seed, std::size_t layer_index,
                  std::span<float> w) {
  std::size_t fan_in = 0, fan_out = 0, rows = 0, cols = 0;
  bool bias_is_row = true;
  if (node.kind == LayerKind::linear) {
    fan_in = input.feature_count();
    fan_out = linear_units(node);
    rows = fan_in + 1;
    cols = fan_out;
  } else if (node.kind == LayerKind::conv2d) {
    const auto p = conv_params(node);
    fan_in = std::size_t{input.channel} * p.kernel * p.kernel;
    fan_out = std::size_t{p.filters} * p.kernel * p.kernel;
    rows = p.filters;
    cols = fan_in + 1;
    bias_is_row = false;
  } else {
    throw std::invalid_argument("layer '" + node.id + "' has no weights");
  }
  expect(w.size(), rows * cols, "weight init");

  Rng mix(seed ^ (0x5851f42d4c957f2dULL * (layer_index + 1)));
  Rng rng(mix.next());
  const float limit =
    std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const bool bias = bias_is_row ? r == rows - 1 : c == cols - 1;
      w[r * cols + c] = bias ? 0.0f : (2.0f * rng.uniform() - 1.0f) * limit;
    }
}

} // namespace nnplan::kernels
