// SPDX-License-Identifier: Apache-2.0
/**
 * @file   reference.cpp
 * @brief  Naive reverse-mode oracle
 */
#include <nnplan/reference.hpp>

#include <nnplan/error.hpp>
#include <nnplan/kernels.hpp>

#include <algorithm>
#include <cmath>

namespace nnplan::reference {

namespace {

using Vec = std::vector<double>;

struct Conv {
  std::size_t B, C, H, W, F, k, s, OH, OW, pt, pl;
};

Conv conv_of(const LayerNode &node, const Dim4 &in) {
  const auto p = conv_params(node);
  Conv c{in.batch, in.channel, in.height, in.width, p.filters, p.kernel,
         p.stride, 0, 0, 0, 0};
  c.OH = (c.H + c.s - 1) / c.s;
  c.OW = (c.W + c.s - 1) / c.s;
  const long th = static_cast<long>((c.OH - 1) * c.s + c.k) - static_cast<long>(c.H);
  const long tw = static_cast<long>((c.OW - 1) * c.s + c.k) - static_cast<long>(c.W);
  c.pt = static_cast<std::size_t>(std::max(th, 0L) / 2);
  c.pl = static_cast<std::size_t>(std::max(tw, 0L) / 2);
  return c;
}

/// input pixel index for (b, c, oy, ox, ky, kx), or -1 in the padding
long pixel(const Conv &c, std::size_t b, std::size_t ch, std::size_t oy,
           std::size_t ox, std::size_t ky, std::size_t kx) {
  const long y = static_cast<long>(oy * c.s + ky) - static_cast<long>(c.pt);
  const long x = static_cast<long>(ox * c.s + kx) - static_cast<long>(c.pl);
  if (y < 0 || x < 0 || y >= static_cast<long>(c.H) ||
      x >= static_cast<long>(c.W))
    return -1;
  return static_cast<long>(((b * c.C + ch) * c.H + static_cast<std::size_t>(y)) * c.W +
                           static_cast<std::size_t>(x));
}

struct Model {
  ModelGraph graph;
  ShapeMap shapes;
};

Model prepare(const ModelGraph &model) {
  Model m{realize(model), {}};
  m.shapes = infer_shapes(m.graph);
  if (!m.graph.has_loss())
    throw GraphError("reference oracle needs a loss layer");
  return m;
}

Vec forward(const LayerNode &node, const Dim4 &in, const Dim4 &out,
            const Vec &x, const Weights &w) {
  Vec y(out.count(), 0.0);
  switch (node.kind) {
  case LayerKind::linear: {
    const std::size_t B = in.batch, I = in.feature_count(),
                      O = out.feature_count();
    const auto &W = w.at(node.id);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < O; ++o) {
        double s = W[I * O + o];
        for (std::size_t i = 0; i < I; ++i)
          s += x[b * I + i] * W[i * O + o];
        y[b * O + o] = s;
      }
    break;
  }
  case LayerKind::conv2d: {
    const auto c = conv_of(node, in);
    const auto &W = w.at(node.id);
    const std::size_t R = c.C * c.k * c.k;
    for (std::size_t b = 0; b < c.B; ++b)
      for (std::size_t f = 0; f < c.F; ++f)
        for (std::size_t oy = 0; oy < c.OH; ++oy)
          for (std::size_t ox = 0; ox < c.OW; ++ox) {
            double s = W[f * (R + 1) + R];
            for (std::size_t ch = 0; ch < c.C; ++ch)
              for (std::size_t ky = 0; ky < c.k; ++ky)
                for (std::size_t kx = 0; kx < c.k; ++kx) {
                  const long p = pixel(c, b, ch, oy, ox, ky, kx);
                  if (p >= 0)
                    s += W[f * (R + 1) + (ch * c.k + ky) * c.k + kx] *
                         x[static_cast<std::size_t>(p)];
                }
            y[((b * c.F + f) * c.OH + oy) * c.OW + ox] = s;
          }
    break;
  }
  case LayerKind::sigmoid:
    for (std::size_t i = 0; i < x.size(); ++i)
      y[i] = 1.0 / (1.0 + std::exp(-x[i]));
    break;
  case LayerKind::relu:
    for (std::size_t i = 0; i < x.size(); ++i)
      y[i] = std::max(0.0, x[i]);
    break;
  case LayerKind::flatten:
  case LayerKind::reshape:
    y = x;
    break;
  default:
    throw GraphError("reference: unexpected layer '" + node.id + "'");
  }
  return y;
}

/// Backpropagates dy through one layer; fills dw for weighted layers.
Vec backward(const LayerNode &node, const Dim4 &in, const Dim4 &out,
             const Vec &x, const Vec &y, const Vec &dy, const Weights &w,
             Vec *dw) {
  Vec dx(in.count(), 0.0);
  switch (node.kind) {
  case LayerKind::linear: {
    const std::size_t B = in.batch, I = in.feature_count(),
                      O = out.feature_count();
    const auto &W = w.at(node.id);
    if (dw) {
      dw->assign((I + 1) * O, 0.0);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < O; ++o) {
          for (std::size_t i = 0; i < I; ++i)
            (*dw)[i * O + o] += x[b * I + i] * dy[b * O + o];
          (*dw)[I * O + o] += dy[b * O + o];
        }
    }
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < I; ++i) {
        double s = 0.0;
        for (std::size_t o = 0; o < O; ++o)
          s += dy[b * O + o] * W[i * O + o];
        dx[b * I + i] = s;
      }
    break;
  }
  case LayerKind::conv2d: {
    const auto c = conv_of(node, in);
    const auto &W = w.at(node.id);
    const std::size_t R = c.C * c.k * c.k;
    if (dw)
      dw->assign(c.F * (R + 1), 0.0);
    for (std::size_t b = 0; b < c.B; ++b)
      for (std::size_t f = 0; f < c.F; ++f)
        for (std::size_t oy = 0; oy < c.OH; ++oy)
          for (std::size_t ox = 0; ox < c.OW; ++ox) {
            const double g = dy[((b * c.F + f) * c.OH + oy) * c.OW + ox];
            if (dw)
              (*dw)[f * (R + 1) + R] += g;
            for (std::size_t ch = 0; ch < c.C; ++ch)
              for (std::size_t ky = 0; ky < c.k; ++ky)
                for (std::size_t kx = 0; kx < c.k; ++kx) {
                  const long p = pixel(c, b, ch, oy, ox, ky, kx);
                  if (p < 0)
                    continue;
                  const std::size_t wi = f * (R + 1) + (ch * c.k + ky) * c.k + kx;
                  if (dw)
                    (*dw)[wi] += g * x[static_cast<std::size_t>(p)];
                  dx[static_cast<std::size_t>(p)] += g * W[wi];
                }
          }
    break;
  }
  case LayerKind::sigmoid:
    for (std::size_t i = 0; i < dx.size(); ++i)
      dx[i] = dy[i] * y[i] * (1.0 - y[i]);
    break;
  case LayerKind::relu:
    for (std::size_t i = 0; i < dx.size(); ++i)
      dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
    break;
  case LayerKind::flatten:
  case LayerKind::reshape:
    dx = dy;
    break;
  default:
    throw GraphError("reference: unexpected layer '" + node.id + "'");
  }
  return dx;
}

Gradients run(const Model &m, const Weights &w, const Vec &input,
              const Vec &label, bool want_grads) {
  const auto &layers = m.graph.layers;
  const std::size_t n = layers.size() - 1; // compute layers incl. loss
  std::vector<Vec> acts(n);
  acts[0] = input;
  if (input.size() != m.shapes.at(layers[1].id).input.count())
    throw std::invalid_argument("reference: input size mismatch");
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const auto &node = layers[i + 1];
    const auto &sh = m.shapes.at(node.id);
    acts[i + 1] = forward(node, sh.input, sh.output, acts[i], w);
  }

  const Vec &pred = acts[n - 1];
  if (label.size() != pred.size())
    throw std::invalid_argument("reference: label size mismatch");
  Gradients out;
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    s += (pred[i] - label[i]) * (pred[i] - label[i]);
  out.loss = s / static_cast<double>(pred.size());
  if (!want_grads)
    return out;

  Vec dy(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i)
    dy[i] = 2.0 * (pred[i] - label[i]) / static_cast<double>(pred.size());
  for (std::size_t i = n - 1; i-- > 0;) {
    const auto &node = layers[i + 1];
    const auto &sh = m.shapes.at(node.id);
    Vec dw;
    const bool trains = node.has_weights() && node.trainable;
    dy = backward(node, sh.input, sh.output, acts[i], acts[i + 1], dy, w,
                  trains ? &dw : nullptr);
    if (trains)
      out.grads[node.id] = std::move(dw);
  }
  return out;
}

Vec to_double(const std::vector<float> &v) { return Vec(v.begin(), v.end()); }

} // namespace

Weights initial_weights(const ModelGraph &model) {
  const auto m = prepare(model);
  Weights w;
  for (std::size_t i = 1; i < m.graph.layers.size(); ++i) {
    const auto &node = m.graph.layers[i];
    if (!node.has_weights())
      continue;
    const auto &in = m.shapes.at(node.id).input;
    std::vector<float> f(weight_dim(node, in).count());
    kernels::init_weights(node, in, m.graph.hyper.seed, i - 1, f);
    w[node.id] = to_double(f);
  }
  return w;
}

double loss(const ModelGraph &model, const Weights &w, const Vec &input,
            const Vec &label) {
  return run(prepare(model), w, input, label, false).loss;
}

Gradients gradients(const ModelGraph &model, const Weights &w,
                    const Vec &input, const Vec &label) {
  return run(prepare(model), w, input, label, true);
}

Result train(const ModelGraph &model, const BatchQueue &queue,
             std::size_t steps) {
  const auto m = prepare(model);
  Result r;
  r.weights = initial_weights(model);
  const auto &h = m.graph.hyper;
  const auto &first = m.shapes.at(m.graph.layers[1].id).input;
  const auto &last = m.shapes.at(m.graph.layers.back().id).input;
  std::vector<float> xf(first.count()), yf(last.count());
  for (std::size_t step = 0; step < steps; ++step) {
    queue.fill(step, xf, yf);
    auto g = run(m, r.weights, to_double(xf), to_double(yf), true);
    if (!std::isfinite(g.loss))
      throw DivergenceError(step + 1);
    r.losses.push_back(g.loss);
    double scale = 1.0;
    if (h.clip_grad_norm) {
      double sq = 0.0;
      for (auto &[id, v] : g.grads)
        for (double d : v)
          sq += d * d;
      const double norm = std::sqrt(sq);
      if (norm > *h.clip_grad_norm)
        scale = *h.clip_grad_norm / norm;
    }
    for (auto &[id, v] : g.grads) {
      auto &W = r.weights.at(id);
      for (std::size_t i = 0; i < W.size(); ++i)
        W[i] -= h.learning_rate * scale * v[i];
    }
  }
  return r;
}

} // namespace nnplan::reference
