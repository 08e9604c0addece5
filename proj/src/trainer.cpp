// SPDX-License-Identifier: Apache-2.0
/**
 * @file   trainer.cpp
 * @brief  Compile pipeline and the training session
 */
#include <nnplan/trainer.hpp>

#include <nnplan/error.hpp>

#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <unistd.h>

namespace nnplan {

namespace {

long long rss_bytes() {
  std::ifstream in("/proc/self/statm");
  long long pages = 0, resident = 0;
  if (!(in >> pages >> resident))
    return 0;
  return resident * static_cast<long long>(::sysconf(_SC_PAGESIZE));
}

long long rss_peak_bytes() {
  std::ifstream in("/proc/self/status");
  std::string key;
  while (in >> key) {
    if (key == "VmHWM:") {
      long long kb = 0;
      in >> kb;
      return kb * 1024;
    }
    std::getline(in, key);
  }
  return 0;
}

blas::ConvGeometry conv_geometry(const LayerNode &node, const Dim4 &input) {
  const auto p = conv_params(node);
  return blas::ConvGeometry::same(input.channel, input.height, input.width,
                                  p.kernel, p.stride);
}

} // namespace

CompiledModel compile(const ModelGraph &model, CompileOptions options) {
  CompiledModel m;
  m.graph = realize(model, {options.require_loss});
  m.shapes = infer_shapes(m.graph);
  auto eo = assign_execution_orders(m.graph);
  m.plan = std::move(eo.plan);
  auto tensors = assign_spatial_relations(m.graph, std::move(eo.tensors));
  m.tensors = options.merge ? merge_tensors(std::move(tensors))
                            : without_views(std::move(tensors));
  m.memory = plan_memory(m.tensors);
  m.lower_bound = peak_live_lower_bound(m.tensors);
  for (std::size_t i = 1; i < m.graph.layers.size(); ++i) {
    const auto &node = m.graph.layers[i];
    if (node.kind != LayerKind::conv2d)
      continue;
    const auto g = conv_geometry(node, m.shapes.at(node.id).input);
    m.scratch_floats =
      std::max(m.scratch_floats, g.patch_rows() * g.patch_cols());
  }
  return m;
}

std::size_t input_features(const CompiledModel &m) {
  return m.shapes.at(m.graph.layers.at(1).id).input.feature_count();
}

std::size_t label_features(const CompiledModel &m) {
  const auto &last = m.graph.layers.back();
  const auto &sh = m.shapes.at(last.id);
  return last.is_loss() ? sh.input.feature_count()
                        : sh.output.feature_count();
}

SyntheticSpec default_synthetic(const CompiledModel &m) {
  SyntheticSpec s;
  s.seed = m.graph.hyper.seed;
  s.count = m.graph.hyper.dataset_size ? m.graph.hyper.dataset_size
                                       : m.graph.hyper.batch_size;
  s.input_size = input_features(m);
  s.label_size = label_features(m);
  return s;
}

nlohmann::json RunReport::to_json() const {
  nlohmann::json j;
  j["swap_mode"] = swap_mode;
  j["lookahead"] = lookahead;
  j["merge"] = merge;
  j["iterations"] = iterations;
  j["wall_seconds"] = wall_seconds;
  auto &ep = j["epochs"] = nlohmann::json::array();
  for (auto &e : epochs)
    ep.push_back({{"epoch", e.epoch},
                  {"iterations", e.iterations},
                  {"mean_loss", e.mean_loss}});
  j["losses"] = losses;
  auto &lat = j["step_latency"] = nlohmann::json::array();
  for (auto &s : step_latency)
    lat.push_back(
      {{"eo", s.eo},
       {"layer", s.layer},
       {"proc", std::string(to_string(s.proc))},
       {"mean_ms", iterations ? 1e3 * s.total_seconds / iterations : 0.0}});
  j["memory"] = {{"planner",
                  {{"pool_bytes", pool_bytes},
                   {"lower_bound_bytes", lower_bound},
                   {"scratch_bytes", scratch_bytes},
                   {"peak_resident_bytes", peak_resident_bytes}}},
                 {"os",
                  {{"rss_delta_bytes", rss_delta_bytes},
                   {"rss_peak_bytes", rss_peak_bytes}}}};
  j["swap"] = {{"swap_in", swap.swap_in},       {"swap_out", swap.swap_out},
               {"allocs", swap.allocs},         {"drops", swap.drops},
               {"stalls", swap.stalls},         {"stall_seconds", swap.stall_seconds},
               {"wps_ops", swap.wps_ops},       {"tps_ops", swap.tps_ops}};
  j["plan"] = {{"tensors", tensors},
               {"root_tensors", root_tensors},
               {"eo_max", eo_max}};
  return j;
}

struct Session::LayerExec {
  const LayerNode *node = nullptr;
  LayerKind kind = LayerKind::input;
  bool first = false;
  std::string x_in, x_out, d_in, d_out, w, dw, y = "Y";
  Dim4 input, output;
  kernels::LinearShape lin;
  blas::ConvGeometry geo;
  std::size_t batch = 0, filters = 0;
};

Session::Session(const ModelGraph &model, TrainOptions options) :
  options_(std::move(options)) {
  rss_base_ = rss_bytes();
  model_ = compile(model, {options_.merge, true});
  lr_ = static_cast<float>(model_.graph.hyper.learning_rate);
  if (options_.swap == SwapKind::proactive && options_.lookahead < 1)
    throw std::invalid_argument("lookahead must be >= 1");

  const auto n = model_.graph.compute_layer_count();
  layers_.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto &L = layers_[i];
    L.node = &model_.graph.layers[i + 1];
    L.kind = L.node->kind;
    L.first = i == 0;
    L.x_in = "X" + std::to_string(i);
    L.x_out = "X" + std::to_string(i + 1);
    L.d_in = "D" + std::to_string(i);
    L.d_out = "D" + std::to_string(i + 1);
    L.w = "W" + std::to_string(i);
    L.dw = "dW" + std::to_string(i);
    const auto &sh = model_.shapes.at(L.node->id);
    L.input = sh.input;
    L.output = sh.output;
    L.batch = sh.input.batch;
    if (L.kind == LayerKind::linear)
      L.lin = {sh.input.batch, sh.input.feature_count(),
               sh.output.feature_count()};
    if (L.kind == LayerKind::conv2d) {
      L.geo = conv_geometry(*L.node, sh.input);
      L.filters = conv_params(*L.node).filters;
    }
    if (L.node->has_weights() && L.node->trainable)
      clip_layers_.push_back(i);
  }
  clip_spans_.reserve(clip_layers_.size());
  scratch_.assign(model_.scratch_floats, 0.0f);

  // initial weights
  std::vector<std::pair<std::string, std::vector<float>>> init;
  for (std::size_t i = 0; i < n; ++i) {
    auto &L = layers_[i];
    if (!L.node->has_weights())
      continue;
    std::vector<float> w(weight_dim(*L.node, L.input).count());
    kernels::init_weights(*L.node, L.input, model_.graph.hyper.seed, i, w);
    init.emplace_back(L.w, std::move(w));
  }

  if (options_.swap == SwapKind::off) {
    arena_ = std::make_unique<Arena>(materialize(model_.memory, model_.tensors));
    for (auto &[name, w] : init)
      std::memcpy(arena_->storage(name).data(), w.data(),
                  w.size() * sizeof(float));
  } else {
    auto schedule = build_swap_schedule(model_.plan, model_.tensors,
                                        options_.swap, options_.lookahead);
    std::vector<std::pair<std::string, std::size_t>> extents;
    for (auto &t : model_.tensors)
      if (t.is_root())
        extents.emplace_back(t.name, t.bytes());
    static std::atomic<unsigned> counter{0};
    auto dir = options_.swap_dir.empty()
                 ? std::filesystem::temp_directory_path()
                 : options_.swap_dir;
    store_path_ = dir / ("nnplan-swap-" + std::to_string(::getpid()) + "-" +
                         std::to_string(counter++) + ".bin");
    store_ = std::make_unique<SwapStore>(store_path_, extents);
    store_->set_latency(options_.store_latency);
    for (auto &[name, w] : init)
      store_->write(name, w);
    engine_ = std::make_unique<SwapEngine>(std::move(schedule), model_.tensors,
                                           *store_);
  }

  // per-step bookkeeping
  const auto &steps = model_.plan.steps;
  step_seconds_.assign(steps.size(), 0.0);
  load_before_.resize(steps.size());
  poison_after_.resize(steps.size());
  begin_position_.assign(steps.size(), -1);
  std::ptrdiff_t pos = -1;
  for (std::size_t s = 0; s < steps.size(); ++s)
    if (s == 0 || steps[s].eo != steps[s - 1].eo)
      begin_position_[s] = ++pos;

  for (auto &t : model_.tensors) {
    if (!t.is_root())
      continue;
    if (t.spatial.kind == SpatialKind::P) {
      std::size_t s = 0;
      while (s < steps.size() && steps[s].eo < t.min_eo())
        ++s;
      if (s < steps.size())
        load_before_[s].push_back(&t);
    }
    if (options_.poison_dead && !t.persistent()) {
      std::ptrdiff_t last = -1;
      for (std::size_t s = 0; s < steps.size(); ++s)
        if (steps[s].eo <= t.max_eo())
          last = static_cast<std::ptrdiff_t>(s);
      if (last >= 0)
        poison_after_[static_cast<std::size_t>(last)].push_back(&t);
    }
  }
}

Session::~Session() {
  engine_.reset();
  store_.reset();
  if (!store_path_.empty()) {
    std::error_code ec;
    std::filesystem::remove(store_path_, ec);
  }
}

std::span<float> Session::get(const std::string &name, int eo) {
  if (arena_)
    return arena_->view(name, eo).data;
  return engine_->view(name, eo);
}

void Session::run_step(const ExecStep &step, float &loss) {
  const auto &L = layers_[step.layer];
  const int eo = step.eo;

  if (step.clip_before) {
    clip_spans_.clear();
    for (auto i : clip_layers_)
      clip_spans_.push_back(get(layers_[i].dw, eo));
    kernels::clip_global_norm(clip_spans_, *model_.graph.hyper.clip_grad_norm);
  }

  switch (L.kind) {
  case LayerKind::linear:
    switch (step.proc) {
    case ProcKind::F:
      kernels::linear_forward(get(L.x_in, eo), get(L.w, eo), get(L.x_out, eo),
                              L.lin);
      break;
    case ProcKind::CG:
      kernels::linear_gradient(get(L.x_in, eo), get(L.d_out, eo),
                               get(L.dw, eo), L.lin);
      break;
    case ProcKind::CD:
      if (!L.first)
        kernels::linear_derivative(get(L.d_out, eo), get(L.w, eo),
                                   get(L.d_in, eo), L.lin);
      break;
    case ProcKind::AG:
      kernels::sgd_apply(get(L.w, eo), get(L.dw, eo), lr_);
      break;
    }
    break;
  case LayerKind::conv2d:
    switch (step.proc) {
    case ProcKind::F:
      kernels::conv_forward(get(L.x_in, eo), get(L.w, eo), get(L.x_out, eo),
                            L.batch, L.filters, L.geo, scratch_);
      break;
    case ProcKind::CG:
      kernels::conv_gradient(get(L.x_in, eo), get(L.d_out, eo),
                             get(L.dw, eo), L.batch, L.filters, L.geo,
                             scratch_);
      break;
    case ProcKind::CD:
      if (!L.first)
        kernels::conv_derivative(get(L.d_out, eo), get(L.w, eo),
                                 get(L.d_in, eo), L.batch, L.filters, L.geo,
                                 scratch_);
      break;
    case ProcKind::AG:
      kernels::sgd_apply(get(L.w, eo), get(L.dw, eo), lr_);
      break;
    }
    break;
  case LayerKind::sigmoid:
    if (step.proc == ProcKind::F)
      kernels::sigmoid_forward(get(L.x_in, eo), get(L.x_out, eo));
    else if (step.proc == ProcKind::CD && !L.first)
      kernels::sigmoid_derivative(get(L.x_out, eo), get(L.d_out, eo),
                                  get(L.d_in, eo));
    break;
  case LayerKind::relu:
    if (step.proc == ProcKind::F)
      kernels::relu_forward(get(L.x_in, eo), get(L.x_out, eo));
    else if (step.proc == ProcKind::CD && !L.first)
      kernels::relu_derivative(get(L.x_out, eo), get(L.d_out, eo),
                               get(L.d_in, eo));
    break;
  case LayerKind::flatten:
  case LayerKind::reshape:
    if (step.proc == ProcKind::F)
      kernels::copy_view(get(L.x_in, eo), get(L.x_out, eo));
    else if (step.proc == ProcKind::CD && !L.first)
      kernels::copy_view(get(L.d_out, eo), get(L.d_in, eo));
    break;
  case LayerKind::mse_loss:
    if (step.proc == ProcKind::F)
      loss = kernels::mse_forward(get(L.x_in, eo), get(L.y, eo));
    else if (step.proc == ProcKind::CD && !L.first)
      kernels::mse_derivative(get(L.x_in, eo), get(L.y, eo), get(L.d_in, eo));
    break;
  case LayerKind::input:
    break;
  }
}

float Session::run_iteration(std::span<const float> input,
                             std::span<const float> label) {
  const bool has_label =
    std::any_of(model_.tensors.begin(), model_.tensors.end(),
                [](auto &t) { return t.name == "Y"; });
  const auto &x0 = find_tensor(model_.tensors, "X0");
  if (input.size() != x0.dim.count())
    throw std::invalid_argument("input batch has " +
                                std::to_string(input.size()) +
                                " floats, expected " +
                                std::to_string(x0.dim.count()));
  if (has_label &&
      label.size() != find_tensor(model_.tensors, "Y").dim.count())
    throw std::invalid_argument("label batch size mismatch");

  if (engine_) {
    store_->write("X0", input);
    if (has_label)
      store_->write("Y", label);
  }

  float loss = 0.0f;
  const auto &steps = model_.plan.steps;
  for (std::size_t s = 0; s < steps.size(); ++s) {
    const auto t0 = std::chrono::steady_clock::now();
    if (engine_ && begin_position_[s] >= 0)
      engine_->begin(static_cast<std::size_t>(begin_position_[s]));
    for (auto *t : load_before_[s]) {
      if (!arena_)
        break;
      auto src = t->name == "X0" ? input : label;
      auto dst = arena_->storage(t->name);
      std::memcpy(dst.data(), src.data(), dst.size_bytes());
    }

    run_step(steps[s], loss);

    for (auto *t : poison_after_[s])
      if (arena_) {
        auto d = arena_->storage(t->name);
        std::fill(d.begin(), d.end(), std::numeric_limits<float>::quiet_NaN());
      }
    step_seconds_[s] += std::chrono::duration<double>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
  }
  if (engine_)
    engine_->end_iteration();

  ++iteration_;
  if (!std::isfinite(loss))
    throw DivergenceError(iteration_);
  return loss;
}

RunReport Session::train(const BatchQueue &queue) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto &h = model_.graph.hyper;
  if (queue.batch_size() != h.batch_size)
    throw std::invalid_argument("batch queue size differs from the model batch");
  const std::size_t per_epoch = queue.batches_per_epoch();
  const std::size_t total =
    options_.max_iterations ? options_.max_iterations : h.epochs * per_epoch;

  staged_input_.assign(h.batch_size * input_features(model_), 0.0f);
  staged_label_.assign(h.batch_size * label_features(model_), 0.0f);

  RunReport r;
  r.losses.reserve(total);
  for (std::size_t it = 0; it < total; ++it) {
    queue.fill(it, staged_input_, staged_label_);
    const float loss = run_iteration(staged_input_, staged_label_);
    r.losses.push_back(loss);
    const std::size_t epoch = it / per_epoch;
    if (r.epochs.size() <= epoch)
      r.epochs.push_back({epoch + 1, 0, 0.0});
    auto &e = r.epochs.back();
    e.mean_loss += (loss - e.mean_loss) / static_cast<double>(++e.iterations);
  }

  r.swap_mode = std::string(to_string(options_.swap));
  r.lookahead = options_.lookahead;
  r.merge = options_.merge;
  r.iterations = total;
  const auto &steps = model_.plan.steps;
  for (std::size_t s = 0; s < steps.size(); ++s)
    r.step_latency.push_back({steps[s].eo, steps[s].layer_id, steps[s].proc,
                              step_seconds_[s]});
  r.pool_bytes = model_.memory.pool_bytes;
  r.lower_bound = model_.lower_bound;
  r.scratch_bytes = model_.scratch_floats * sizeof(float);
  if (engine_) {
    r.swap = engine_->stats();
    r.peak_resident_bytes = r.swap.peak_resident_bytes;
  } else {
    r.peak_resident_bytes = model_.memory.pool_bytes;
  }
  r.tensors = model_.tensors.size();
  r.root_tensors = static_cast<std::size_t>(
    std::count_if(model_.tensors.begin(), model_.tensors.end(),
                  [](auto &t) { return t.is_root(); }));
  r.eo_max = model_.plan.eo_max;
  r.wall_seconds =
    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
  r.rss_delta_bytes = rss_bytes() - rss_base_;
  r.rss_peak_bytes = rss_peak_bytes();
  return r;
}

WeightMap Session::weights() const {
  WeightMap out;
  for (auto &L : layers_) {
    if (!L.node->has_weights())
      continue;
    std::vector<float> w(weight_dim(*L.node, L.input).count());
    if (arena_) {
      auto s = arena_->storage(L.w);
      std::copy(s.begin(), s.end(), w.begin());
    } else {
      store_->read(L.w, w);
    }
    out[L.node->id] = std::move(w);
  }
  return out;
}

void Session::set_weights(const WeightMap &weights) {
  for (auto &L : layers_) {
    if (!L.node->has_weights())
      continue;
    auto it = weights.find(L.node->id);
    if (it == weights.end())
      continue;
    const auto count = weight_dim(*L.node, L.input).count();
    if (it->second.size() != count)
      throw std::invalid_argument("weight '" + L.node->id +
                                  "' has the wrong size");
    if (arena_)
      std::copy(it->second.begin(), it->second.end(),
                arena_->storage(L.w).begin());
    else
      store_->write(L.w, it->second);
  }
}

void Session::export_weights(const std::filesystem::path &path) const {
  auto w = weights();
  std::vector<std::pair<std::string, std::span<const float>>> items;
  for (auto &[id, v] : w)
    items.emplace_back(id, v);
  SwapStore::save(path, items);
}

} // namespace nnplan
