// SPDX-License-Identifier: Apache-2.0
/**
 * @file   exec_order.hpp
 * @brief  Execution-order assignment, tensor requests and tensor merging
 *
 * Every compute layer L_i (i = 0..N-1, the input node excluded) owns four
 * fine-grained procedures: forward (F), compute gradient (CG), compute
 * derivative (CD) and apply gradient (AG). Forward orders are i; backward
 * orders count from N using the reversed index r = N-1-i so that the last
 * layer is differentiated first:
 *
 *   no clipping    CG = N + 3r, CD = CG + 1, AG = CD + 1
 *   clipping       CG = N + 2r, CD = CG + 1, AG = 3N + r
 *   frozen layer   CG = CD = AG = (CG of its branch), only CD runs
 *
 * Each tensor a layer requests collects the orders of the procedures that
 * touch it. Tensors linked by a view relation are then merged so they share
 * storage.
 *
 * Tensor names are positional: X<i> is the input of L_i (X0 is the batch),
 * D<i> the derivative with respect to X<i>, W<i>/dW<i> the weight and its
 * gradient, Y the label.
 */
#pragma once

#include <nnplan/graph.hpp>

#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace nnplan {

enum class ProcKind : std::uint8_t { F, CG, CD, AG };

std::string_view to_string(ProcKind proc);

enum class Temporal : std::uint8_t { F, CG, CD, AG, B, I, M };

class TemporalSet {
public:
  TemporalSet() = default;
  TemporalSet(std::initializer_list<Temporal> items) {
    for (auto t : items)
      add(t);
  }
  void add(Temporal t) { mask_ |= bit(t); }
  bool has(Temporal t) const noexcept { return mask_ & bit(t); }
  TemporalSet &operator|=(TemporalSet other) {
    mask_ |= other.mask_;
    return *this;
  }
  bool operator==(const TemporalSet &) const = default;
  /// e.g. "F,CG"
  std::string str() const;

private:
  static std::uint8_t bit(Temporal t) {
    return static_cast<std::uint8_t>(1u << static_cast<unsigned>(t));
  }
  std::uint8_t mask_ = 0;
};

Temporal temporal_of(ProcKind proc);

enum class SpatialKind : std::uint8_t { P, C, MV, RV, E };

struct SpatialRelation {
  SpatialKind kind = SpatialKind::C;
  std::string target;

  std::string str() const;
  bool operator==(const SpatialRelation &) const = default;
};

enum class TensorRole : std::uint8_t {
  weight,
  gradient,
  activation,
  derivative,
  label
};

std::string_view to_string(TensorRole role);

struct TensorSpec {
  std::string name;
  Dim4 dim;
  std::size_t elem_bytes = 4;
  TemporalSet temporal;
  SpatialRelation spatial;
  std::set<int> eos;
  TensorRole role = TensorRole::activation;
  /// name of the tensor whose storage this one shares; empty for roots
  std::string merged_into;

  std::size_t bytes() const noexcept { return dim.count() * elem_bytes; }
  int min_eo() const { return *eos.begin(); }
  int max_eo() const { return *eos.rbegin(); }
  bool is_root() const noexcept { return merged_into.empty(); }
  /// live for the whole iteration and across iterations
  bool persistent() const noexcept { return temporal.has(Temporal::M); }
};

enum class Access : std::uint8_t { read, write, read_write };

struct TensorAccess {
  std::string tensor;
  Access mode = Access::read;
};

struct ExecStep {
  int eo = 0;
  /// index into the compute layers (graph.layers[layer + 1])
  std::size_t layer = 0;
  std::string layer_id;
  ProcKind proc = ProcKind::F;
  /// tensors this procedure touches, by their pre-merge names
  std::vector<TensorAccess> accesses;
  /// global-norm gradient clipping runs right before this AG
  bool clip_before = false;
};

/// All four orders of one layer, whether or not the procedure executes.
struct LayerOrders {
  int f = 0, cg = 0, cd = 0, ag = 0;
};

struct ExecPlan {
  std::vector<ExecStep> steps;
  std::vector<LayerOrders> orders;
  int eo_max = 0;
};

struct ExecOrderResult {
  ExecPlan plan;
  std::vector<TensorSpec> tensors;
};

/// Assigns EOs to every procedure and collects the tensor requests of every
/// layer. Spatial relations are left at C; see assign_spatial_relations.
ExecOrderResult assign_execution_orders(const ModelGraph &graph);

/// P for batch and label, MV/RV for the outputs (and outgoing derivatives)
/// of in-place and view layers, C otherwise.
std::vector<TensorSpec> assign_spatial_relations(const ModelGraph &graph,
                                                 std::vector<TensorSpec> tensors);

/// Merges view-related tensors. A merged tensor keeps its own entry with
/// merged_into set; its root absorbs its EOs. An MV merge whose target is
/// still read after the candidate's first write is refused and the candidate
/// falls back to C.
std::vector<TensorSpec> merge_tensors(std::vector<TensorSpec> tensors);

/// Resets every view relation to C (merging disabled).
std::vector<TensorSpec> without_views(std::vector<TensorSpec> tensors);

const TensorSpec &find_tensor(const std::vector<TensorSpec> &tensors,
                              std::string_view name);
/// Follows merged_into to the storage owner.
const TensorSpec &root_of(const std::vector<TensorSpec> &tensors,
                          std::string_view name);

} // namespace nnplan
