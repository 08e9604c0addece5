// SPDX-License-Identifier: Apache-2.0
/**
 * @file   graph_test.cpp
 * @brief  Model parsing, realizers and shape inference
 */
#include "common.hpp"

#include <nnplan/error.hpp>
#include <nnplan/graph.hpp>

#include <gtest/gtest.h>

using namespace nnplan;

namespace {

constexpr const char *linear_text = "[model]\nbatch=64\n[in]\ntype=input\n"
                                    "shape=1:1:150528\n[fc]\ntype=linear\n"
                                    "units=300\n[loss]\ntype=mse";

/// Independent shape oracle: same-padded conv output size.
std::uint32_t same_out(std::uint32_t in, std::uint32_t stride) {
  return (in + stride - 1) / stride;
}

} // namespace

TEST(Parse, LinearModelHasThreeNodes) {
  const auto g = parse_model(linear_text);
  ASSERT_EQ(g.layers.size(), 3u);
  EXPECT_EQ(g.hyper.batch_size, 64u);
  EXPECT_EQ(g.layers[0].kind, LayerKind::input);
  EXPECT_EQ(g.layers[1].kind, LayerKind::linear);
  EXPECT_EQ(g.layers[2].kind, LayerKind::mse_loss);
  EXPECT_TRUE(g.layers[1].trainable);
}

TEST(Parse, EmptyTextIsSyntaxError) {
  EXPECT_THROW(parse_model(""), ParseError);
  EXPECT_THROW(parse_model("   \n# only a comment\n"), ParseError);
}

TEST(Parse, UnknownKindRejected) {
  EXPECT_THROW(parse_model("[model]\nbatch=1\n[in]\ntype=input\nshape=1:1:4\n"
                           "[r]\ntype=lstm\nunits=4\n"),
               ParseError);
}

TEST(Parse, MalformedLinesReportLine) {
  try {
    parse_model("[model]\nbatch=1\n[in]\ntype=input\nnot a key value\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError &e) {
    EXPECT_EQ(e.line(), 5u);
  }
}

TEST(Parse, DimForms) {
  EXPECT_EQ(parse_dim("3:32:32"), (Dim4{1, 3, 32, 32}));
  EXPECT_EQ(parse_dim("2:3:4:5"), (Dim4{2, 3, 4, 5}));
  EXPECT_THROW(parse_dim("3:x:2"), GraphError);
  EXPECT_THROW(parse_dim("1:2"), GraphError);
}

TEST(Realize, ActivationBecomesSeparateNode) {
  auto g = realize(parse_model(
      "[model]\nbatch=2\n[in]\ntype=input\nshape=1:1:4\n[fc]\ntype=linear\n"
      "units=3\nactivation=sigmoid\n[loss]\ntype=mse\n"));
  ASSERT_EQ(g.layers.size(), 4u);
  EXPECT_EQ(g.layers[1].kind, LayerKind::linear);
  EXPECT_EQ(g.layers[2].kind, LayerKind::sigmoid);
  EXPECT_EQ(g.layers[2].inplace_class, InplaceClass::modify_view);
  EXPECT_EQ(g.layers[1].property("activation"), nullptr);
}

TEST(Realize, IsIdempotent) {
  const auto once = realize(test::model("desk_conv.ini"));
  const auto twice = realize(once);
  ASSERT_EQ(once.layers.size(), twice.layers.size());
  for (std::size_t i = 0; i < once.layers.size(); ++i) {
    EXPECT_EQ(once.layers[i].id, twice.layers[i].id);
    EXPECT_EQ(once.layers[i].kind, twice.layers[i].kind);
    EXPECT_EQ(once.layers[i].properties, twice.layers[i].properties);
  }
}

TEST(Realize, MissingLossRejectedForTraining) {
  const auto g = test::model("walk_linear3.ini");
  EXPECT_THROW(realize(g), GraphError);
  EXPECT_NO_THROW(realize(g, {.require_loss = false}));
}

TEST(Shapes, ConvSamePadding) {
  const auto g = realize(parse_model(
      "[model]\nbatch=32\n[in]\ntype=input\nshape=3:32:32\n[c]\ntype=conv2d\n"
      "filters=64\nkernel=3\n[loss]\ntype=mse\n"));
  const auto s = infer_shapes(g);
  EXPECT_EQ(s.at("c").output, (Dim4{32, 64, 32, 32}));
}

TEST(Shapes, FlattenAndLinear) {
  const auto g = realize(parse_model(
      "[model]\nbatch=64\n[in]\ntype=input\nshape=64:32:32\n[f]\n"
      "type=flatten\n[fc]\ntype=linear\nunits=300\n[loss]\ntype=mse\n"));
  const auto s = infer_shapes(g);
  EXPECT_EQ(s.at("f").output, (Dim4{64, 1, 1, 65536}));
  EXPECT_EQ(s.at("fc").output, (Dim4{64, 1, 1, 300}));
  const auto l = infer_shapes(realize(parse_model(linear_text)));
  EXPECT_EQ(l.at("fc").output, (Dim4{64, 1, 1, 300}));
}

TEST(Shapes, ConvIntoLinearWithoutFlattenRejected) {
  const auto g = parse_model(
      "[model]\nbatch=2\n[in]\ntype=input\nshape=3:8:8\n[c]\ntype=conv2d\n"
      "filters=64\nkernel=3\n[fc]\ntype=linear\nunits=10\n[loss]\ntype=mse\n");
  EXPECT_THROW(infer_shapes(realize(g)), GraphError);
}

TEST(Shapes, ReshapeMustKeepElementCount) {
  const auto g = parse_model(
      "[model]\nbatch=2\n[in]\ntype=input\nshape=1:1:16\n[r]\ntype=reshape\n"
      "shape=1:4:5\n[loss]\ntype=mse\n");
  EXPECT_THROW(infer_shapes(realize(g)), GraphError);
}

TEST(Shapes, MatchIndependentOracleOnVgg) {
  const auto g = realize(test::model("vgg16_desk.ini"));
  const auto s = infer_shapes(g);
  std::uint32_t c = 3, h = 32, w = 32;
  const auto batch = g.hyper.batch_size;
  for (std::size_t i = 1; i < g.layers.size(); ++i) {
    const auto &node = g.layers[i];
    const auto &sh = s.at(node.id);
    EXPECT_EQ(sh.input, (Dim4{batch, c, h, w})) << node.id;
    switch (node.kind) {
    case LayerKind::conv2d: {
      const auto p = conv_params(node);
      c = p.filters;
      h = same_out(h, p.stride);
      w = same_out(w, p.stride);
      break;
    }
    case LayerKind::linear:
      w = linear_units(node);
      c = h = 1;
      break;
    case LayerKind::flatten:
      w = c * h * w;
      c = h = 1;
      break;
    default:
      break;
    }
    if (!node.is_loss())
      EXPECT_EQ(sh.output, (Dim4{batch, c, h, w})) << node.id;
  }
  EXPECT_EQ(w, 10u);
}

TEST(Shapes, WeightDimFoldsBias) {
  const auto g = realize(test::model("desk_conv.ini"));
  const auto s = infer_shapes(g);
  for (const auto &node : g.layers) {
    if (!node.has_weights())
      continue;
    const auto &in = s.at(node.id).input;
    const auto wd = weight_dim(node, in);
    if (node.kind == LayerKind::linear)
      EXPECT_EQ(wd.count(), (in.feature_count() + 1) * linear_units(node));
    else {
      const auto p = conv_params(node);
      EXPECT_EQ(wd.count(),
                p.filters * (in.channel * p.kernel * p.kernel + 1));
    }
  }
}
