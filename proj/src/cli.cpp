// SPDX-License-Identifier: Apache-2.0
/**
 * @file   cli.cpp
 * @brief  Command-line front end
 */
#include <nnplan/cli.hpp>

#include <nnplan/error.hpp>
#include <nnplan/reference.hpp>
#include <nnplan/trainer.hpp>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace nnplan {

namespace {

double kib(std::size_t bytes) { return static_cast<double>(bytes) / 1024.0; }

std::string join_eos(const std::set<int> &eos) {
  std::string s = "{";
  for (auto it = eos.begin(); it != eos.end(); ++it)
    s += (it == eos.begin() ? "" : ",") + std::to_string(*it);
  return s + "}";
}

struct ModelArgs {
  std::string path;
  std::vector<std::string> freeze;
  double clip = 0.0;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

void add_model_args(CLI::App *cmd, ModelArgs &a) {
  cmd->add_option("model", a.path, "model description (.ini)")
    ->required()
    ->check(CLI::ExistingFile);
  cmd->add_option("--freeze", a.freeze,
                  "mark a layer non-trainable (repeatable)");
  cmd->add_option("--clip", a.clip, "global-norm gradient clipping threshold");
  cmd->add_option_function<std::uint64_t>(
    "--seed",
    [&a](const std::uint64_t &s) {
      a.seed = s;
      a.seed_set = true;
    },
    "weight-init and data seed");
}

ModelGraph load(const ModelArgs &a) {
  auto g = load_model(a.path);
  for (auto &id : a.freeze) {
    auto it = std::find_if(g.layers.begin(), g.layers.end(),
                           [&](auto &l) { return l.id == id; });
    if (it == g.layers.end())
      throw GraphError("--freeze: no layer named '" + id + "'");
    it->properties["trainable"] = "false";
    it->trainable = false;
  }
  if (a.clip > 0.0)
    g.hyper.clip_grad_norm = a.clip;
  if (a.seed_set)
    g.hyper.seed = a.seed;
  return g;
}

struct DataArgs {
  std::string file;
  std::string rule = "teacher";
  std::string distribution = "uniform";
  float scale = 1.0f;
};

void add_data_args(CLI::App *cmd, DataArgs &d) {
  cmd->add_option("--data", d.file,
                  "raw float32 records (input then label per sample)");
  cmd->add_option("--labels", d.rule, "synthetic labels: random|identity|teacher");
  cmd->add_option("--distribution", d.distribution,
                  "synthetic inputs: uniform|normal");
  cmd->add_option("--scale", d.scale, "synthetic label scale");
}

std::unique_ptr<DataProducer> make_data(const DataArgs &d,
                                        const CompiledModel &m) {
  if (!d.file.empty())
    return std::make_unique<FileData>(d.file, input_features(m),
                                      label_features(m));
  auto spec = default_synthetic(m);
  spec.rule = parse_label_rule(d.rule);
  spec.distribution = parse_distribution(d.distribution);
  spec.scale = d.scale;
  return std::make_unique<SyntheticData>(spec);
}

nlohmann::json plan_json(const CompiledModel &m) {
  nlohmann::json j;
  auto &steps = j["steps"] = nlohmann::json::array();
  for (auto &s : m.plan.steps) {
    nlohmann::json acc = nlohmann::json::array();
    for (auto &a : s.accesses)
      acc.push_back({{"tensor", a.tensor},
                     {"mode", a.mode == Access::read    ? "r"
                              : a.mode == Access::write ? "w"
                                                        : "rw"}});
    steps.push_back({{"eo", s.eo},
                     {"layer", s.layer_id},
                     {"proc", std::string(to_string(s.proc))},
                     {"clip_before", s.clip_before},
                     {"accesses", acc}});
  }
  auto &ts = j["tensors"] = nlohmann::json::array();
  for (auto &t : m.tensors) {
    nlohmann::json e = {{"name", t.name},
                        {"dim", t.dim.str()},
                        {"bytes", t.bytes()},
                        {"role", std::string(to_string(t.role))},
                        {"temporal", t.temporal.str()},
                        {"spatial", t.spatial.str()},
                        {"eos", t.eos},
                        {"merged_into", t.merged_into}};
    const auto &root = root_of(m.tensors, t.name);
    e["offset"] = m.memory.assignments.at(root.name).offset;
    ts.push_back(e);
  }
  j["eo_max"] = m.plan.eo_max;
  j["pool_bytes"] = m.memory.pool_bytes;
  j["lower_bound_bytes"] = m.lower_bound;
  j["scratch_bytes"] = m.scratch_floats * sizeof(float);
  return j;
}

void print_plan(std::ostream &out, const CompiledModel &m) {
  fmt::print(out, "Execution order (eo_max = {})\n", m.plan.eo_max);
  fmt::print(out, "  {:>4}  {:<16} {:<4} accesses\n", "EO", "layer", "proc");
  for (auto &s : m.plan.steps) {
    std::string acc;
    for (auto &a : s.accesses)
      acc += fmt::format(" {}:{}", a.tensor,
                         a.mode == Access::read    ? "r"
                         : a.mode == Access::write ? "w"
                                                   : "rw");
    fmt::print(out, "  {:>4}  {:<16} {:<4}{}{}\n", s.eo, s.layer_id,
               to_string(s.proc), s.clip_before ? " [clip]" : "", acc);
  }
  fmt::print(out, "\nTensors\n");
  fmt::print(out, "  {:<6} {:<18} {:>12} {:<14} {:<10} {:>12}  eos\n", "name",
             "dim", "bytes", "temporal", "spatial", "offset");
  for (auto &t : m.tensors) {
    const auto &root = root_of(m.tensors, t.name);
    std::string spatial = t.spatial.str();
    if (!t.is_root())
      spatial += "*";
    fmt::print(out, "  {:<6} {:<18} {:>12} {:<14} {:<10} {:>12}  {}\n",
               t.name, t.dim.str(), t.bytes(), t.temporal.str(), spatial,
               m.memory.assignments.at(root.name).offset, join_eos(t.eos));
  }
  fmt::print(out, "  (* merged: shares the storage of its view target)\n");
  fmt::print(out, "\nMemory plan\n");
  fmt::print(out, "  pool_bytes   {:>14}  ({:.1f} KiB, {:.2f} MiB)\n",
             m.memory.pool_bytes, kib(m.memory.pool_bytes),
             kib(m.memory.pool_bytes) / 1024.0);
  fmt::print(out, "  lower bound  {:>14}  ({:.1f} KiB)\n", m.lower_bound,
             kib(m.lower_bound));
  fmt::print(out, "  pool / bound {:>14.4f}\n",
             m.lower_bound ? static_cast<double>(m.memory.pool_bytes) /
                               static_cast<double>(m.lower_bound)
                           : 1.0);
  fmt::print(out, "  im2col scratch (outside pool) {} bytes\n",
             m.scratch_floats * sizeof(float));
}

double max_abs_delta(const WeightMap &a, const reference::Weights &b) {
  double worst = 0.0;
  for (auto &[id, w] : a) {
    const auto &r = b.at(id);
    for (std::size_t i = 0; i < w.size(); ++i)
      worst = std::max(worst, std::abs(static_cast<double>(w[i]) - r[i]));
  }
  return worst;
}

} // namespace

int run_cli(int argc, const char *const *argv, std::ostream &out,
            std::ostream &err) {
  CLI::App app{"nnplan: static memory planning and swap for on-device "
               "training"};
  app.require_subcommand(1);

  // plan
  ModelArgs plan_model;
  bool plan_no_merge = false, plan_as_json = false;
  auto *plan = app.add_subcommand("plan", "print EO table, tensors and the "
                                          "memory plan");
  add_model_args(plan, plan_model);
  plan->add_flag("--no-merge", plan_no_merge, "disable view merging");
  plan->add_flag("--json", plan_as_json, "emit JSON");

  // train
  ModelArgs train_model;
  DataArgs train_data;
  std::string swap_text, report_path, export_path, swap_dir;
  int lookahead = 0;
  std::size_t iterations = 0;
  long latency_us = 0;
  bool train_no_merge = false;
  auto *train = app.add_subcommand("train", "train and write a run report");
  add_model_args(train, train_model);
  add_data_args(train, train_data);
  train->add_option("--swap", swap_text, "off|ondemand|reduced|proactive");
  train->add_option("--lookahead", lookahead, "proactive lookahead (>= 1)");
  train->add_option("--iterations", iterations,
                    "iterations to run (default: all epochs)");
  train->add_option("--report", report_path, "write the run report JSON here");
  train->add_option("--export", export_path, "export trained weights");
  train->add_option("--swap-dir", swap_dir, "directory of the swap store");
  train->add_option("--latency-us", latency_us,
                    "injected store latency per I/O (microseconds)");
  train->add_flag("--no-merge", train_no_merge, "disable view merging");

  // verify
  ModelArgs verify_model;
  DataArgs verify_data;
  std::size_t verify_steps = 10;
  double tolerance = 1e-4;
  std::string verify_swap = "off";
  auto *verify = app.add_subcommand(
    "verify", "compare training against the reference oracle");
  add_model_args(verify, verify_model);
  add_data_args(verify, verify_data);
  verify->add_option("--steps", verify_steps, "SGD steps (default 10)");
  verify->add_option("--tolerance", tolerance, "max-abs weight delta");
  verify->add_option("--swap", verify_swap, "swap mode of the trained run");

  // sweep
  ModelArgs sweep_model;
  DataArgs sweep_data;
  std::vector<std::string> modes{"off", "ondemand", "reduced", "proactive"};
  std::size_t sweep_iterations = 1;
  int sweep_lookahead = 1;
  long sweep_latency_us = 0;
  bool sweep_json = false;
  auto *sweep = app.add_subcommand(
    "sweep", "compare swap modes: peak bytes, swap counts, wall time");
  add_model_args(sweep, sweep_model);
  add_data_args(sweep, sweep_data);
  sweep->add_option("--swap-modes", modes, "comma separated modes")
    ->delimiter(',');
  sweep->add_option("--iterations", sweep_iterations, "iterations per mode");
  sweep->add_option("--lookahead", sweep_lookahead, "proactive lookahead");
  sweep->add_option("--latency-us", sweep_latency_us,
                    "injected store latency per I/O (microseconds)");
  sweep->add_flag("--json", sweep_json, "emit JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    std::ostringstream o, er;
    const int code = app.exit(e, o, er);
    out << o.str();
    err << er.str();
    return code;
  }

  try {
    if (*plan) {
      auto m = compile(load(plan_model), {!plan_no_merge, false});
      if (plan_as_json)
        out << plan_json(m).dump(2) << '\n';
      else
        print_plan(out, m);
      return 0;
    }

    if (*train) {
      auto graph = load(train_model);
      TrainOptions opt;
      opt.merge = !train_no_merge;
      opt.swap = swap_text.empty() ? graph.hyper.swap
                                   : parse_swap_kind(swap_text);
      opt.lookahead = lookahead ? lookahead : graph.hyper.lookahead;
      opt.max_iterations = iterations;
      opt.swap_dir = swap_dir;
      opt.store_latency = std::chrono::microseconds(latency_us);
      Session session(graph, opt);
      auto data = make_data(train_data, session.model());
      BatchQueue queue(*data, graph.hyper.batch_size);
      auto report = session.train(queue);
      auto j = report.to_json();
      j["model"] = train_model.path;
      if (!report_path.empty()) {
        std::ofstream f(report_path);
        if (!f)
          throw std::runtime_error("cannot write " + report_path);
        f << j.dump(2) << '\n';
      }
      if (!export_path.empty())
        session.export_weights(export_path);
      fmt::print(out,
                 "trained {} iterations, swap {}: final loss {:.6g}, peak "
                 "resident {} bytes, swap in/out {}/{}, {:.3f} s\n",
                 report.iterations, report.swap_mode,
                 report.losses.empty() ? 0.0 : report.losses.back(),
                 report.peak_resident_bytes, report.swap.swap_in,
                 report.swap.swap_out, report.wall_seconds);
      if (report_path.empty())
        out << j.dump(2) << '\n';
      return 0;
    }

    if (*verify) {
      auto graph = load(verify_model);
      TrainOptions opt;
      opt.swap = parse_swap_kind(verify_swap);
      opt.max_iterations = verify_steps;
      Session session(graph, opt);
      auto data = make_data(verify_data, session.model());
      BatchQueue queue(*data, graph.hyper.batch_size);
      session.train(queue);
      auto ref = reference::train(graph, queue, verify_steps);
      const double delta = max_abs_delta(session.weights(), ref.weights);
      const bool ok = delta <= tolerance;
      fmt::print(out, "verify {}: {} steps, max-abs weight delta {:.3e} "
                      "(tolerance {:.1e}) {}\n",
                 verify_model.path, verify_steps, delta, tolerance,
                 ok ? "PASS" : "FAIL");
      return ok ? 0 : 1;
    }

    if (*sweep) {
      auto graph = load(sweep_model);
      struct Row {
        std::string mode;
        RunReport report;
        bool identical;
      };
      std::vector<Row> rows;
      WeightMap baseline;
      bool have_baseline = false;
      for (auto &mode_text : modes) {
        TrainOptions opt;
        opt.swap = parse_swap_kind(mode_text);
        opt.lookahead = sweep_lookahead;
        opt.max_iterations = sweep_iterations;
        opt.store_latency = std::chrono::microseconds(sweep_latency_us);
        Session session(graph, opt);
        auto data = make_data(sweep_data, session.model());
        BatchQueue queue(*data, graph.hyper.batch_size);
        auto report = session.train(queue);
        auto w = session.weights();
        if (opt.swap == SwapKind::off && !have_baseline) {
          baseline = w;
          have_baseline = true;
        }
        std::string label(to_string(opt.swap));
        if (opt.swap == SwapKind::proactive)
          label += "(" + std::to_string(sweep_lookahead) + ")";
        rows.push_back({label, report, !have_baseline || w == baseline});
      }
      if (sweep_json) {
        auto arr = nlohmann::json::array();
        for (auto &r : rows) {
          auto j = r.report.to_json();
          j.erase("step_latency");
          j["mode"] = r.mode;
          j["weights_match_off"] = r.identical;
          arr.push_back(j);
        }
        out << arr.dump(2) << '\n';
        return 0;
      }
      fmt::print(out, "{:<14} {:>14} {:>10} {:>8} {:>8} {:>8} {:>10} {:>8}\n",
                 "mode", "peak bytes", "peak MiB", "swap-in", "swap-out",
                 "stalls", "wall s", "=off");
      for (auto &r : rows)
        fmt::print(out,
                   "{:<14} {:>14} {:>10.2f} {:>8} {:>8} {:>8} {:>10.3f} {:>8}\n",
                   r.mode, r.report.peak_resident_bytes,
                   kib(r.report.peak_resident_bytes) / 1024.0,
                   r.report.swap.swap_in, r.report.swap.swap_out,
                   r.report.swap.stalls, r.report.wall_seconds,
                   r.identical ? "yes" : "NO");
      return 0;
    }
  } catch (const ParseError &e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception &e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

} // namespace nnplan
