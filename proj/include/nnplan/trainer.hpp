// SPDX-License-Identifier: Apache-2.0
/**
 * @file   trainer.hpp
 * @brief  Compile pipeline, training session and run report
 */
#pragma once

#include <nnplan/blas.hpp>
#include <nnplan/data.hpp>
#include <nnplan/exec_order.hpp>
#include <nnplan/kernels.hpp>
#include <nnplan/planner.hpp>
#include <nnplan/swap.hpp>
#include <nnplan/tensor.hpp>

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace nnplan {

struct CompileOptions {
  /// false forces every spatial relation to C
  bool merge = true;
  bool require_loss = true;
};

/// realize -> shapes -> EOs -> spatial relations -> merge -> plan
struct CompiledModel {
  ModelGraph graph;
  ShapeMap shapes;
  ExecPlan plan;
  std::vector<TensorSpec> tensors;
  MemoryPlan memory;
  std::size_t lower_bound = 0;
  /// floats of the shared im2col buffer (outside the pool)
  std::size_t scratch_floats = 0;
};

CompiledModel compile(const ModelGraph &model, CompileOptions options = {});

/// Sizes of one input sample and one label, from the compiled shapes.
std::size_t input_features(const CompiledModel &m);
std::size_t label_features(const CompiledModel &m);

struct TrainOptions {
  bool merge = true;
  SwapKind swap = SwapKind::off;
  int lookahead = 1;
  /// directory of the swap store file; the system temp dir when empty
  std::filesystem::path swap_dir;
  std::chrono::microseconds store_latency{0};
  /// 0 runs hyper.epochs full epochs
  std::size_t max_iterations = 0;
  /// overwrite tensors with NaN right after their last use (off mode only)
  bool poison_dead = false;
};

struct EpochStat {
  std::size_t epoch = 0;
  std::size_t iterations = 0;
  double mean_loss = 0.0;
};

struct StepLatency {
  int eo = 0;
  std::string layer;
  ProcKind proc = ProcKind::F;
  double total_seconds = 0.0;
};

struct RunReport {
  std::string swap_mode;
  int lookahead = 1;
  bool merge = true;
  std::size_t iterations = 0;
  std::vector<EpochStat> epochs;
  std::vector<double> losses;
  std::vector<StepLatency> step_latency;
  std::size_t pool_bytes = 0;
  std::size_t lower_bound = 0;
  std::size_t scratch_bytes = 0;
  std::size_t peak_resident_bytes = 0;
  SwapStats swap;
  std::size_t tensors = 0;
  std::size_t root_tensors = 0;
  int eo_max = 0;
  double wall_seconds = 0.0;
  /// OS-observed resident set, separate from planner numbers
  long long rss_delta_bytes = 0;
  long long rss_peak_bytes = 0;

  nlohmann::json to_json() const;
};

using WeightMap = std::map<std::string, std::vector<float>>;

/**
 * One training session: arena (or swap cache), kernels and the step loop.
 * With swap off, an iteration performs no heap allocation.
 */
class Session {
public:
  explicit Session(const ModelGraph &model, TrainOptions options = {});
  ~Session();
  Session(const Session &) = delete;
  Session &operator=(const Session &) = delete;

  /// Runs one iteration on a batch; returns the loss (0 without a loss).
  float run_iteration(std::span<const float> input,
                      std::span<const float> label);

  /// Trains over the queue for the configured epochs or iterations.
  RunReport train(const BatchQueue &queue);

  /// Trained weights by layer id, bias folded in.
  WeightMap weights() const;
  void set_weights(const WeightMap &weights);
  void export_weights(const std::filesystem::path &path) const;

  const CompiledModel &model() const noexcept { return model_; }
  const TrainOptions &options() const noexcept { return options_; }
  std::size_t iterations() const noexcept { return iteration_; }
  /// Non-null only under swap.
  const SwapEngine *swap_engine() const noexcept { return engine_.get(); }

private:
  struct LayerExec;

  std::span<float> get(const std::string &name, int eo);
  void run_step(const ExecStep &step, float &loss);

  CompiledModel model_;
  TrainOptions options_;
  std::vector<LayerExec> layers_;
  std::unique_ptr<Arena> arena_;
  std::unique_ptr<SwapStore> store_;
  std::unique_ptr<SwapEngine> engine_;
  std::filesystem::path store_path_;
  std::vector<float> scratch_;
  std::vector<float> staged_input_, staged_label_;
  std::vector<std::span<float>> clip_spans_;
  std::vector<std::size_t> clip_layers_;
  std::vector<double> step_seconds_;
  /// per step index: P tensors to copy in, tensors to poison after
  std::vector<std::vector<const TensorSpec *>> load_before_, poison_after_;
  /// per step index: swap schedule position to begin, or -1
  std::vector<std::ptrdiff_t> begin_position_;
  long long rss_base_ = 0;
  std::size_t iteration_ = 0;
  float lr_ = 0.0f;
};

/// Convenience: build a queue-driving producer matching the model's shapes.
SyntheticSpec default_synthetic(const CompiledModel &m);

} // namespace nnplan
