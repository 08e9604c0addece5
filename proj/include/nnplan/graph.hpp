// SPDX-License-Identifier: Apache-2.0
/**
 * @file   graph.hpp
 * @brief  Model description, layer graph and realizer lowering passes
 *
 * A model is loaded from an INI-like description into a ModelGraph whose
 * properties are still plain strings. realize() lowers convenience
 * properties (activation=, flatten=) into explicit nodes and checks that the
 * result is a linear chain from one input node to one loss node.
 * infer_shapes() then types the properties and propagates Dim4 shapes.
 */
#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace nnplan {

/// batch:channel:height:width element counts.
struct Dim4 {
  std::uint32_t batch = 1;
  std::uint32_t channel = 1;
  std::uint32_t height = 1;
  std::uint32_t width = 1;

  std::size_t count() const noexcept {
    return std::size_t{batch} * channel * height * width;
  }
  /// elements of one batch item
  std::size_t feature_count() const noexcept {
    return std::size_t{channel} * height * width;
  }

  std::string str() const;
  auto operator<=>(const Dim4 &) const = default;
};

/// Parses "C:H:W" (batch defaults to 1) or "B:C:H:W".
Dim4 parse_dim(std::string_view text);

enum class LayerKind {
  input,
  linear,
  conv2d,
  sigmoid,
  relu,
  flatten,
  reshape,
  mse_loss
};

enum class InplaceClass { none, modify_view, read_only_view };

std::string_view to_string(LayerKind kind);

struct LayerNode {
  std::string id;
  LayerKind kind = LayerKind::input;
  std::map<std::string, std::string> properties;
  bool trainable = false;
  InplaceClass inplace_class = InplaceClass::none;

  /// linear and conv2d own a weight tensor, trainable or frozen
  bool has_weights() const noexcept {
    return kind == LayerKind::linear || kind == LayerKind::conv2d;
  }
  bool is_loss() const noexcept { return kind == LayerKind::mse_loss; }
  const std::string *property(const std::string &key) const;
};

/// Builds a node with the invariants (trainable, inplace class) of its kind.
LayerNode make_node(std::string id, LayerKind kind,
                    std::map<std::string, std::string> properties = {});

enum class SwapKind { off, on_demand, reduced, proactive };

std::string_view to_string(SwapKind kind);
SwapKind parse_swap_kind(std::string_view text);

struct Hyper {
  std::uint32_t batch_size = 1;
  std::uint32_t epochs = 1;
  double learning_rate = 0.01;
  std::optional<std::string> loss;
  std::string optimizer = "sgd";
  std::optional<double> clip_grad_norm;
  SwapKind swap = SwapKind::off;
  int lookahead = 1;
  std::uint64_t seed = 0;
  /// 0 means one batch per epoch
  std::uint32_t dataset_size = 0;
  std::optional<std::string> input_shape;
};

struct ModelGraph {
  std::vector<LayerNode> layers;
  Hyper hyper;

  /// Layers that take part in execution (everything after the input node).
  std::size_t compute_layer_count() const noexcept;
  bool has_loss() const noexcept {
    return !layers.empty() && layers.back().is_loss();
  }
};

ModelGraph parse_model(std::string_view text);
ModelGraph load_model(const std::filesystem::path &path);

struct RealizeOptions {
  /// Walkthrough graphs without a terminal loss are allowed when false.
  bool require_loss = true;
};

/// Input, Activation, Flatten and Loss realizers, in that order. Idempotent.
ModelGraph realize(ModelGraph graph, RealizeOptions options = {});

struct LayerShapes {
  Dim4 input;
  Dim4 output;
};

using ShapeMap = std::map<std::string, LayerShapes>;

ShapeMap infer_shapes(const ModelGraph &graph);

struct ConvParams {
  std::uint32_t filters = 0;
  std::uint32_t kernel = 0;
  std::uint32_t stride = 1;
};

std::uint32_t linear_units(const LayerNode &node);
ConvParams conv_params(const LayerNode &node);

/// Weight tensor shape including the folded-in bias.
/// linear: (in + 1) x units, bias is the last row.
/// conv2d: filters x (C*k*k + 1), bias is the last column.
Dim4 weight_dim(const LayerNode &node, const Dim4 &input);

} // namespace nnplan
