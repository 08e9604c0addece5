// SPDX-License-Identifier: Apache-2.0
/**
 * @file   exec_order.cpp
 * @brief  Execution-order assignment and tensor merging
 */
#include <nnplan/exec_order.hpp>

#include <nnplan/error.hpp>

#include <algorithm>
#include <map>
#include <numeric>

namespace nnplan {

std::string_view to_string(ProcKind proc) {
  switch (proc) {
  case ProcKind::F:
    return "F";
  case ProcKind::CG:
    return "CG";
  case ProcKind::CD:
    return "CD";
  case ProcKind::AG:
    return "AG";
  }
  return "?";
}

std::string_view to_string(TensorRole role) {
  switch (role) {
  case TensorRole::weight:
    return "weight";
  case TensorRole::gradient:
    return "gradient";
  case TensorRole::activation:
    return "activation";
  case TensorRole::derivative:
    return "derivative";
  case TensorRole::label:
    return "label";
  }
  return "?";
}

Temporal temporal_of(ProcKind proc) {
  switch (proc) {
  case ProcKind::F:
    return Temporal::F;
  case ProcKind::CG:
    return Temporal::CG;
  case ProcKind::CD:
    return Temporal::CD;
  case ProcKind::AG:
    return Temporal::AG;
  }
  return Temporal::F;
}

std::string TemporalSet::str() const {
  static const char *names[] = {"F", "CG", "CD", "AG", "B", "I", "M"};
  std::string out;
  for (unsigned i = 0; i < 7; ++i) {
    if (!has(static_cast<Temporal>(i)))
      continue;
    if (!out.empty())
      out += ',';
    out += names[i];
  }
  return out;
}

std::string SpatialRelation::str() const {
  switch (kind) {
  case SpatialKind::P:
    return "P";
  case SpatialKind::C:
    return "C";
  case SpatialKind::MV:
    return "MV(" + target + ")";
  case SpatialKind::RV:
    return "RV(" + target + ")";
  case SpatialKind::E:
    return "E(" + target + ")";
  }
  return "?";
}

namespace {

std::string xname(std::size_t i) { return "X" + std::to_string(i); }
std::string dname(std::size_t i) { return "D" + std::to_string(i); }

class RequestCollector {
public:
  /// Adds the EO of `step` to tensor `name` and records the access.
  void request(ExecStep *step, const std::string &name, const Dim4 &dim,
               TensorRole role, Access mode, bool persistent = false) {
    auto &t = get_or_insert(name, dim, role);
    if (persistent)
      t.temporal.add(Temporal::M);
    if (!step)
      return;
    t.temporal.add(temporal_of(step->proc));
    t.eos.insert(step->eo);
    step->accesses.push_back({name, mode});
  }

  /// Registers the tensor without an access (used for persistent weights).
  TensorSpec &get_or_insert(const std::string &name, const Dim4 &dim,
                            TensorRole role) {
    auto it = index_.find(name);
    if (it != index_.end())
      return tensors_[it->second];
    index_[name] = tensors_.size();
    TensorSpec t;
    t.name = name;
    t.dim = dim;
    t.role = role;
    tensors_.push_back(std::move(t));
    return tensors_.back();
  }

  std::vector<TensorSpec> take() { return std::move(tensors_); }

private:
  std::vector<TensorSpec> tensors_;
  std::map<std::string, std::size_t> index_;
};

} // namespace

ExecOrderResult assign_execution_orders(const ModelGraph &graph) {
  const auto shapes = infer_shapes(graph);
  const auto n = graph.compute_layer_count();
  const int N = static_cast<int>(n);
  const bool clipping = graph.hyper.clip_grad_norm.has_value();

  ExecOrderResult result;
  auto &plan = result.plan;
  plan.eo_max = 4 * N;
  plan.orders.resize(n);

  // EO assignment
  for (std::size_t i = 0; i < n; ++i) {
    const auto &node = graph.layers[i + 1];
    const int r = N - 1 - static_cast<int>(i);
    LayerOrders o;
    o.f = static_cast<int>(i);
    if (clipping) {
      o.cg = N + r * 2;
      o.cd = o.cg + 1;
      o.ag = 3 * N + r;
    } else {
      o.cg = N + r * 3;
      o.cd = o.cg + 1;
      o.ag = o.cd + 1;
    }
    if (node.has_weights() && !node.trainable)
      o.cd = o.ag = o.cg;
    plan.orders[i] = o;
  }

  // executed steps, one per (layer, procedure)
  struct LayerSteps {
    std::size_t f, cg, cd, ag;
  };
  constexpr auto none = static_cast<std::size_t>(-1);
  std::vector<LayerSteps> step_index(n, {none, none, none, none});
  for (std::size_t i = 0; i < n; ++i) {
    const auto &node = graph.layers[i + 1];
    const auto &o = plan.orders[i];
    auto add = [&](ProcKind proc, int eo) {
      plan.steps.push_back({eo, i, node.id, proc, {}, false});
      return plan.steps.size() - 1;
    };
    step_index[i].f = add(ProcKind::F, o.f);
    const bool trains = node.has_weights() && node.trainable;
    if (trains)
      step_index[i].cg = add(ProcKind::CG, o.cg);
    step_index[i].cd = add(ProcKind::CD, o.cd);
    if (trains)
      step_index[i].ag = add(ProcKind::AG, o.ag);
  }

  RequestCollector rc;
  auto step = [&](std::size_t idx) -> ExecStep * {
    return idx == none ? nullptr : &plan.steps[idx];
  };

  for (std::size_t i = 0; i < n; ++i) {
    const auto &node = graph.layers[i + 1];
    const auto &sh = shapes.at(node.id);
    const auto &si = step_index[i];
    auto *F = step(si.f), *CG = step(si.cg), *CD = step(si.cd),
         *AG = step(si.ag);
    const bool first = i == 0;
    const auto x_in = xname(i), x_out = xname(i + 1);
    const auto d_in = dname(i), d_out = dname(i + 1);
    const auto A = TensorRole::activation, D = TensorRole::derivative;

    switch (node.kind) {
    case LayerKind::linear:
    case LayerKind::conv2d: {
      const auto wdim = weight_dim(node, sh.input);
      const auto w = "W" + std::to_string(i), dw = "dW" + std::to_string(i);

      rc.request(F, x_in, sh.input, A, Access::read);
      rc.request(F, x_out, sh.output, A, Access::write);
      rc.request(F, w, wdim, TensorRole::weight, Access::read, true);
      if (CG) {
        rc.request(CG, x_in, sh.input, A, Access::read);
        rc.request(CG, d_out, sh.output, D, Access::read);
        rc.request(CG, dw, wdim, TensorRole::gradient, Access::write);
      }
      if (!first) {
        rc.request(CD, w, wdim, TensorRole::weight, Access::read, true);
        rc.request(CD, d_out, sh.output, D, Access::read);
        rc.request(CD, d_in, sh.input, D, Access::write);
      }
      if (AG) {
        rc.request(AG, w, wdim, TensorRole::weight, Access::read_write, true);
        rc.request(AG, dw, wdim, TensorRole::gradient, Access::read);
      }
      break;
    }
    case LayerKind::sigmoid:
    case LayerKind::relu:
      rc.request(F, x_in, sh.input, A, Access::read);
      rc.request(F, x_out, sh.output, A, Access::write);
      if (!first) {
        rc.request(CD, x_out, sh.output, A, Access::read);
        rc.request(CD, d_out, sh.output, D, Access::read);
        rc.request(CD, d_in, sh.input, D, Access::write);
      }
      break;
    case LayerKind::flatten:
    case LayerKind::reshape:
      rc.request(F, x_in, sh.input, A, Access::read);
      rc.request(F, x_out, sh.output, A, Access::write);
      if (!first) {
        rc.request(CD, d_out, sh.output, D, Access::read);
        rc.request(CD, d_in, sh.input, D, Access::write);
      }
      break;
    case LayerKind::mse_loss:
      rc.request(F, x_in, sh.input, A, Access::read);
      rc.request(F, "Y", sh.input, TensorRole::label, Access::read);
      rc.request(CD, x_in, sh.input, A, Access::read);
      rc.request(CD, "Y", sh.input, TensorRole::label, Access::read);
      if (!first)
        rc.request(CD, d_in, sh.input, D, Access::write);
      break;
    case LayerKind::input:
      throw GraphError("input layer '" + node.id + "' in the middle of the graph");
    }
  }

  // gradient clipping reads every gradient right before the first AG
  if (clipping) {
    ExecStep *first_ag = nullptr;
    for (auto &s : plan.steps)
      if (s.proc == ProcKind::AG && (!first_ag || s.eo < first_ag->eo))
        first_ag = &s;
    if (first_ag) {
      first_ag->clip_before = true;
      for (std::size_t i = 0; i < n; ++i) {
        if (step_index[i].ag == none)
          continue;
        const auto &node = graph.layers[i + 1];
        const auto dw = "dW" + std::to_string(i);
        rc.request(first_ag, dw, weight_dim(node, shapes.at(node.id).input),
                   TensorRole::gradient, Access::read_write);
      }
      // de-duplicate the gradient of the clipping layer itself
      auto &acc = first_ag->accesses;
      std::vector<TensorAccess> uniq;
      for (auto &a : acc) {
        auto it = std::find_if(uniq.begin(), uniq.end(),
                               [&](auto &u) { return u.tensor == a.tensor; });
        if (it == uniq.end())
          uniq.push_back(a);
        else if (it->mode != a.mode)
          it->mode = Access::read_write;
      }
      acc = std::move(uniq);
    }
  }

  std::stable_sort(plan.steps.begin(), plan.steps.end(),
                   [](auto &a, auto &b) { return a.eo < b.eo; });

  result.tensors = rc.take();
  for (auto &t : result.tensors) {
    if (t.persistent()) {
      t.eos.insert(0);
      t.eos.insert(plan.eo_max - 1);
    }
  }
  return result;
}

std::vector<TensorSpec> assign_spatial_relations(const ModelGraph &graph,
                                                 std::vector<TensorSpec> tensors) {
  std::map<std::string, std::size_t> index;
  for (std::size_t k = 0; k < tensors.size(); ++k)
    index[tensors[k].name] = k;
  auto find = [&](const std::string &name) -> TensorSpec * {
    auto it = index.find(name);
    return it == index.end() ? nullptr : &tensors[it->second];
  };

  for (auto &t : tensors)
    t.spatial = {SpatialKind::C, {}};
  if (auto *x0 = find("X0"))
    x0->spatial = {SpatialKind::P, {}};
  if (auto *y = find("Y"))
    y->spatial = {SpatialKind::P, {}};

  const auto n = graph.compute_layer_count();
  for (std::size_t i = 0; i < n; ++i) {
    const auto &node = graph.layers[i + 1];
    SpatialKind kind;
    if (node.inplace_class == InplaceClass::modify_view)
      kind = SpatialKind::MV;
    else if (node.inplace_class == InplaceClass::read_only_view)
      kind = SpatialKind::RV;
    else
      continue;

    auto link = [&](const std::string &view, const std::string &target) {
      auto *v = find(view);
      if (!v)
        return;
      auto *t = find(target);
      if (!t)
        throw PlanError("view target '" + target + "' of '" + view +
                        "' does not exist");
      // never write through an externally owned buffer
      if (t->spatial.kind == SpatialKind::P)
        return;
      v->spatial = {kind, target};
    };
    link(xname(i + 1), xname(i));
    link(dname(i), dname(i + 1));
  }
  return tensors;
}

std::vector<TensorSpec> merge_tensors(std::vector<TensorSpec> tensors) {
  std::map<std::string, std::size_t> index;
  for (std::size_t k = 0; k < tensors.size(); ++k)
    index[tensors[k].name] = k;
  auto root = [&](std::size_t k) {
    while (!tensors[k].merged_into.empty())
      k = index.at(tensors[k].merged_into);
    return k;
  };

  std::vector<std::size_t> order(tensors.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
    return tensors[a].min_eo() < tensors[b].min_eo();
  });

  for (auto k : order) {
    auto &t = tensors[k];
    const auto kind = t.spatial.kind;
    if (kind != SpatialKind::MV && kind != SpatialKind::RV &&
        kind != SpatialKind::E)
      continue;
    auto it = index.find(t.spatial.target);
    if (it == index.end())
      throw PlanError("view target '" + t.spatial.target + "' of '" + t.name +
                      "' does not exist");
    auto r = root(it->second);
    auto &target = tensors[r];
    if (kind == SpatialKind::MV && t.min_eo() < target.max_eo()) {
      t.spatial = {SpatialKind::C, {}};
      continue;
    }
    if (t.dim.count() != target.dim.count())
      throw PlanError("cannot merge '" + t.name + "' into '" + target.name +
                      "': element counts differ");
    t.merged_into = target.name;
    target.eos.insert(t.eos.begin(), t.eos.end());
    target.temporal |= t.temporal;
  }
  return tensors;
}

std::vector<TensorSpec> without_views(std::vector<TensorSpec> tensors) {
  for (auto &t : tensors) {
    auto k = t.spatial.kind;
    if (k == SpatialKind::MV || k == SpatialKind::RV || k == SpatialKind::E)
      t.spatial = {SpatialKind::C, {}};
    t.merged_into.clear();
  }
  return tensors;
}

const TensorSpec &find_tensor(const std::vector<TensorSpec> &tensors,
                              std::string_view name) {
  for (auto &t : tensors)
    if (t.name == name)
      return t;
  throw PlanError("no tensor named '" + std::string(name) + "'");
}

const TensorSpec &root_of(const std::vector<TensorSpec> &tensors,
                          std::string_view name) {
  const auto *t = &find_tensor(tensors, name);
  while (!t->merged_into.empty())
    t = &find_tensor(tensors, t->merged_into);
  return *t;
}

} // namespace nnplan
