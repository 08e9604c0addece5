// SPDX-License-Identifier: Apache-2.0
/**
 * @file   trainer_test.cpp
 * @brief  End-to-end training, the reference oracle and data plumbing
 */
#include "common.hpp"

#include <nnplan/error.hpp>
#include <nnplan/reference.hpp>
#include <nnplan/swap.hpp>
#include <nnplan/trainer.hpp>

#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include <unistd.h>

using namespace nnplan;
namespace fs = std::filesystem;

namespace {

const char *const desk_models[] = {"desk_inplace.ini", "desk_conv.ini",
                                   "desk_fc_frozen_clip.ini"};

struct Run {
  WeightMap weights;
  RunReport report;
};

Run run(const ModelGraph &g, TrainOptions o, const SyntheticSpec *spec = nullptr) {
  Session s(g, o);
  SyntheticData data(spec ? *spec : default_synthetic(s.model()));
  BatchQueue q(data, s.model().graph.hyper.batch_size);
  Run r;
  r.report = s.train(q);
  r.weights = s.weights();
  return r;
}

bool bit_equal(const WeightMap &a, const WeightMap &b) {
  if (a.size() != b.size())
    return false;
  for (const auto &[id, v] : a) {
    const auto it = b.find(id);
    if (it == b.end() || it->second.size() != v.size() ||
        std::memcmp(it->second.data(), v.data(), v.size() * sizeof(float)))
      return false;
  }
  return true;
}

ModelGraph doubling_model(double lr, std::uint32_t epochs) {
  return parse_model("[model]\nbatch=8\nseed=3\ndataset_size=64\n"
                     "learning_rate=" + std::to_string(lr) +
                     "\nepochs=" + std::to_string(epochs) +
                     "\n[in]\ntype=input\nshape=1:1:4\n[fc]\ntype=linear\n"
                     "units=4\n[loss]\ntype=mse\n");
}

SyntheticSpec doubling_data(std::size_t count) {
  SyntheticSpec s;
  s.seed = 9;
  s.count = count;
  s.input_size = s.label_size = 4;
  s.rule = LabelRule::scaled_identity;
  s.scale = 2.0f;
  return s;
}

fs::path temp_file(const std::string &stem) {
  return fs::temp_directory_path() /
         (stem + "-" + std::to_string(::getpid()) + ".bin");
}

} // namespace

TEST(Train, FitsDoublingMap) {
  const auto spec = doubling_data(64);
  TrainOptions o;
  o.max_iterations = 200;
  const auto r = run(doubling_model(0.5, 1), o, &spec);
  ASSERT_EQ(r.report.losses.size(), 200u);
  EXPECT_LT(r.report.losses.back(), 1e-3);
  EXPECT_LT(r.report.losses.back(), r.report.losses.front());
}

TEST(Train, ZeroLearningRateKeepsWeights) {
  const auto g = doubling_model(0.0, 1);
  Session fresh(g);
  const auto before = fresh.weights();
  TrainOptions o;
  o.max_iterations = 25;
  EXPECT_TRUE(bit_equal(run(g, o).weights, before));
  auto conv = test::model("desk_conv.ini");
  conv.hyper.learning_rate = 0.0;
  EXPECT_TRUE(bit_equal(run(conv, o).weights, Session(conv).weights()));
}

TEST(Train, ConvexLossNonIncreasingOverEpochs) {
  // full batch and a small step: gradient descent on a convex quadratic
  auto g = doubling_model(0.05, 30);
  g.hyper.dataset_size = 8;
  const auto spec = doubling_data(8);
  const auto r = run(g, {}, &spec);
  ASSERT_EQ(r.report.epochs.size(), 30u);
  for (std::size_t e = 1; e < r.report.epochs.size(); ++e)
    EXPECT_LE(r.report.epochs[e].mean_loss, r.report.epochs[e - 1].mean_loss) << e;
}

TEST(Train, DeterministicUnderFixedSeed) {
  TrainOptions o;
  o.max_iterations = 8;
  for (const char *name : desk_models)
    EXPECT_TRUE(bit_equal(run(test::model(name), o).weights,
                          run(test::model(name), o).weights))
        << name;
}

TEST(Train, UnmergedRunIsBitIdentical) {
  TrainOptions merged, plain;
  merged.max_iterations = plain.max_iterations = 8;
  plain.merge = false;
  for (const char *name : desk_models) {
    const auto a = run(test::model(name), merged);
    const auto b = run(test::model(name), plain);
    EXPECT_TRUE(bit_equal(a.weights, b.weights)) << name;
    EXPECT_LT(a.report.pool_bytes, b.report.pool_bytes) << name;
  }
}

TEST(Train, PoisonedDeadTensorsChangeNothing) {
  TrainOptions normal, poison;
  normal.max_iterations = poison.max_iterations = 8;
  poison.poison_dead = true;
  for (const char *name : desk_models)
    EXPECT_TRUE(bit_equal(run(test::model(name), normal).weights,
                          run(test::model(name), poison).weights))
        << name;
}

TEST(Train, DivergenceReportsIteration) {
  auto g = doubling_model(1e6, 1);
  TrainOptions o;
  o.max_iterations = 50;
  try {
    run(g, o);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError &e) {
    EXPECT_GE(e.iteration(), 1u);
    EXPECT_LE(e.iteration(), 50u);
  }
}

TEST(Train, ClippedNormEqualsThreshold) {
  // weights after one step differ from the start by lr * clipped gradient
  const auto g = test::model("desk_fc_frozen_clip.ini");
  const double max_norm = *g.hyper.clip_grad_norm;
  Session s(g);
  const auto before = s.weights();
  SyntheticData data(default_synthetic(s.model()));
  BatchQueue q(data, g.hyper.batch_size);
  std::vector<float> x(g.hyper.batch_size * input_features(s.model()));
  std::vector<float> y(g.hyper.batch_size * label_features(s.model()));
  q.fill(0, x, y);

  const auto w0 = reference::initial_weights(g);
  std::vector<double> xd(x.begin(), x.end()), yd(y.begin(), y.end());
  const auto grads = reference::gradients(g, w0, xd, yd);
  double sq = 0.0;
  for (const auto &[id, v] : grads.grads)
    for (double d : v)
      sq += d * d;
  ASSERT_GT(std::sqrt(sq), max_norm) << "model must actually clip";

  s.run_iteration(x, y);
  const auto after = s.weights();
  double step_sq = 0.0;
  for (const auto &[id, v] : after)
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double d = (double(before.at(id)[i]) - v[i]);
      step_sq += d * d;
    }
  EXPECT_NEAR(std::sqrt(step_sq) / g.hyper.learning_rate, max_norm, 1e-3 * max_norm);
}

TEST(Oracle, AgreesWithTrainingOnDeskModels) {
  for (const char *name : desk_models) {
    const auto g = test::model(name);
    for (auto mode : {SwapKind::off, SwapKind::reduced, SwapKind::proactive}) {
      TrainOptions o;
      o.swap = mode;
      o.max_iterations = 10;
      Session s(g, o);
      SyntheticData data(default_synthetic(s.model()));
      BatchQueue q(data, g.hyper.batch_size);
      s.train(q);
      const auto ref = reference::train(g, q, 10);
      double worst = 0.0;
      for (const auto &[id, v] : s.weights())
        for (std::size_t i = 0; i < v.size(); ++i)
          worst = std::max(worst, std::abs(v[i] - ref.weights.at(id)[i]));
      EXPECT_LE(worst, 1e-4) << name << " " << to_string(mode);
    }
  }
}

TEST(Oracle, GradientsMatchFiniteDifferences) {
  for (const char *name : desk_models) {
    const auto g = test::model(name);
    const auto m = compile(g);
    SyntheticData data(default_synthetic(m));
    BatchQueue q(data, g.hyper.batch_size);
    std::vector<float> xf(g.hyper.batch_size * input_features(m));
    std::vector<float> yf(g.hyper.batch_size * label_features(m));
    q.fill(0, xf, yf);
    const std::vector<double> x(xf.begin(), xf.end()), y(yf.begin(), yf.end());
    auto w = reference::initial_weights(g);
    const auto analytic = reference::gradients(g, w, x, y);
    for (const auto &[id, grad] : analytic.grads) {
      auto &v = w.at(id);
      // probe a spread of entries, biases included
      for (std::size_t i = 0; i < v.size(); i += std::max<std::size_t>(1, v.size() / 23)) {
        const double keep = v[i], h = 1e-5;
        v[i] = keep + h;
        const double up = reference::loss(g, w, x, y);
        v[i] = keep - h;
        const double down = reference::loss(g, w, x, y);
        v[i] = keep;
        const double fd = (up - down) / (2 * h);
        EXPECT_NEAR(grad[i], fd, 1e-3 * std::max(std::abs(fd), 1e-3))
            << name << " " << id << "[" << i << "]";
      }
    }
  }
}

TEST(Oracle, ZeroLearningRate) {
  auto g = test::model("desk_conv.ini");
  g.hyper.learning_rate = 0.0;
  SyntheticData data(default_synthetic(compile(g)));
  BatchQueue q(data, g.hyper.batch_size);
  EXPECT_EQ(reference::train(g, q, 5).weights, reference::initial_weights(g));
}

TEST(Report, JsonHasPlannerAndOsMemorySeparately) {
  TrainOptions o;
  o.max_iterations = 3;
  o.swap = SwapKind::reduced;
  const auto r = run(test::model("desk_conv.ini"), o);
  const auto j = r.report.to_json();
  EXPECT_EQ(j.at("swap_mode"), "reduced");
  EXPECT_EQ(j.at("losses").size(), 3u);
  EXPECT_TRUE(j.at("memory").contains("planner"));
  EXPECT_TRUE(j.at("memory").contains("os"));
  EXPECT_GT(j.at("swap").at("swap_in").get<std::size_t>(), 0u);
  EXPECT_EQ(j.at("step_latency").size(), compile(test::model("desk_conv.ini")).plan.steps.size());
  EXPECT_EQ(nlohmann::json::parse(j.dump()), j);
}

TEST(Report, ExportedWeightsRoundTrip) {
  const auto g = test::model("desk_conv.ini");
  Session s(g);
  const auto path = temp_file("export");
  s.export_weights(path);
  const auto loaded = SwapStore::load(path);
  EXPECT_TRUE(bit_equal(WeightMap(loaded.begin(), loaded.end()), s.weights()));
  Session other(g);
  auto shifted = s.weights();
  for (auto &[id, v] : shifted)
    for (auto &x : v)
      x += 1.0f;
  other.set_weights(shifted);
  EXPECT_TRUE(bit_equal(other.weights(), shifted));
  fs::remove(path);
}

TEST(Data, QueueDropsPartialBatch) {
  SyntheticSpec spec;
  spec.count = 10;
  spec.input_size = 3;
  spec.label_size = 2;
  SyntheticData d(spec);
  BatchQueue q(d, 4);
  EXPECT_EQ(q.batches_per_epoch(), 2u);
  std::vector<float> x(12), y(8), x2(12), y2(8), s(3), l(2);
  q.fill(3, x, y); // wraps to batch 1
  q.fill(1, x2, y2);
  EXPECT_EQ(x, x2);
  d.sample(4, s, l);
  EXPECT_EQ(std::vector<float>(x.begin(), x.begin() + 3), s);
  EXPECT_THROW(BatchQueue(d, 11), std::invalid_argument);
}

TEST(Data, SyntheticIsDeterministic) {
  SyntheticSpec spec;
  spec.seed = 5;
  spec.count = 4;
  spec.input_size = spec.label_size = 3;
  spec.rule = LabelRule::scaled_identity;
  spec.scale = 2.0f;
  SyntheticData a(spec), b(spec);
  std::vector<float> x(3), y(3), x2(3), y2(3);
  for (std::size_t i = 0; i < 4; ++i) {
    a.sample(i, x, y);
    b.sample(i, x2, y2);
    EXPECT_EQ(x, x2);
    for (std::size_t j = 0; j < 3; ++j)
      EXPECT_EQ(y[j], 2.0f * x[j]);
  }
  EXPECT_THROW(parse_label_rule("nonsense"), std::invalid_argument);
}

TEST(Data, FileRecords) {
  const auto path = temp_file("records");
  {
    std::ofstream f(path, std::ios::binary);
    const float rec[] = {1, 2, 3, 10, 4, 5, 6, 20, 7, 8, 9, 30};
    f.write(reinterpret_cast<const char *>(rec), sizeof rec);
  }
  FileData d(path, 3, 1);
  EXPECT_EQ(d.size(), 3u);
  std::vector<float> x(3), y(1);
  d.sample(1, x, y);
  EXPECT_EQ(x, (std::vector<float>{4, 5, 6}));
  EXPECT_EQ(y[0], 20.0f);
  EXPECT_THROW(FileData(path, 5, 0), std::runtime_error);
  fs::remove(path);
}
