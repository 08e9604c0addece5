// SPDX-License-Identifier: Apache-2.0
/**
 * @file   swap.hpp
 * @brief  Swap scheduling, backing store and the cache pool loader
 *
 * Under swap every root tensor lives in the backing store and is brought
 * into a cache buffer only around the steps that touch it. The schedule is
 * computed once from the execution plan:
 *
 *   on_demand   resident(n) = access(n); everything touched at the previous
 *               step is written back and everything touched now is read in
 *   reduced     resident(n) = access(n); tensors used by adjacent steps stay,
 *               write-first tensors are allocated instead of read, clean or
 *               dead tensors are dropped instead of written back
 *   proactive   resident(n) = access(n) plus every tensor whose next use
 *               lies within n + k and either reads it or finds it still
 *               cached; the loader fetches k steps ahead while compute runs
 *
 * "n" counts executed steps, not raw EOs, so EOs without a procedure (the
 * CG/AG slots of weightless layers) do not force an evict/reload cycle.
 * Every iteration starts and ends with an empty cache; weights are written
 * back (WPS) and re-read by the next iteration's forward.
 */
#pragma once

#include <nnplan/exec_order.hpp>
#include <nnplan/tensor.hpp>

#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <exception>
#include <filesystem>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

namespace nnplan {

enum class SwapAction : std::uint8_t {
  load,  ///< read from the store into a new cache buffer (counted swap-in)
  alloc, ///< new cache buffer, contents not needed (write-first)
  store, ///< write back, then free (counted swap-out)
  drop   ///< free without writing
};

/// weights use WPS, everything else TPS
enum class SwapStream : std::uint8_t { wps, tps };

std::string_view to_string(SwapAction action);
std::string_view to_string(SwapStream stream);

struct SwapOp {
  SwapAction action = SwapAction::load;
  std::string tensor; ///< root tensor name
  SwapStream stream = SwapStream::tps;
  /// position (index into SwapSchedule::eos) that must see this op done
  std::size_t needed_at = 0;
};

struct SwapSchedule {
  SwapKind mode = SwapKind::off;
  int lookahead = 1;
  /// EOs that execute at least one step, ascending
  std::vector<int> eos;
  /// issue[p] is enqueued right before the step at eos[p] runs, evictions
  /// first; issue[eos.size()] empties the cache at the end of an iteration
  std::vector<std::vector<SwapOp>> issue;
  /// root tensors resident while the step at eos[p] runs
  std::vector<std::vector<std::string>> resident;
  /// bytes of every root tensor
  std::map<std::string, std::size_t> bytes;

  bool empty() const noexcept { return issue.empty(); }
  std::size_t count(SwapAction action) const;
  std::size_t swap_in_count() const { return count(SwapAction::load); }
  std::size_t swap_out_count() const { return count(SwapAction::store); }
  /// counted swap operations (loads and stores)
  std::size_t swap_ops() const { return swap_in_count() + swap_out_count(); }
  std::size_t resident_bytes(std::size_t position) const;
  std::size_t peak_resident_bytes() const;
  /// tensors brought in (load or alloc) by issue[p]
  std::vector<std::string> prefetch(std::size_t position) const;
  /// tensors evicted (store or drop) by issue[p]
  std::vector<std::string> offload(std::size_t position) const;
};

/// Mode off yields an empty schedule. lookahead must be >= 1 for proactive.
SwapSchedule build_swap_schedule(const ExecPlan &plan,
                                 const std::vector<TensorSpec> &tensors,
                                 SwapKind mode, int lookahead = 1);

/**
 * One preallocated file holding every tensor at a fixed extent:
 *
 *   "NNPSWAP1" | u32 count | count x (u32 name_len, name, u64 offset,
 *   u64 bytes) | padding | float32 little-endian extents (64-byte aligned)
 *
 * The same format is used to export trained weights.
 */
class SwapStore {
public:
  struct Extent {
    std::uint64_t offset = 0;
    std::uint64_t bytes = 0;
  };

  /// Creates (truncating) the file with the given tensor sizes in order.
  SwapStore(std::filesystem::path path,
            const std::vector<std::pair<std::string, std::size_t>> &tensors);
  /// Opens an existing store.
  explicit SwapStore(std::filesystem::path path);
  ~SwapStore();
  SwapStore(const SwapStore &) = delete;
  SwapStore &operator=(const SwapStore &) = delete;

  /// eo only labels errors
  void write(const std::string &name, std::span<const float> data, int eo = -1);
  void read(const std::string &name, std::span<float> data, int eo = -1) const;

  bool contains(const std::string &name) const;
  const std::map<std::string, Extent> &extents() const { return extents_; }
  /// tensor names in file order
  const std::vector<std::string> &names() const { return order_; }
  const std::filesystem::path &path() const { return path_; }

  /// Extra wall-clock delay per read/write, to emulate slow storage.
  void set_latency(std::chrono::microseconds latency) { latency_ = latency; }

  /// Writes a whole store in one go.
  static void save(const std::filesystem::path &path,
                   const std::vector<std::pair<std::string, std::span<const float>>> &tensors);
  /// Reads a whole store.
  static std::map<std::string, std::vector<float>>
  load(const std::filesystem::path &path);

private:
  const Extent &extent(const std::string &name, std::size_t elems,
                       int eo) const;

  std::filesystem::path path_;
  int fd_ = -1;
  std::map<std::string, Extent> extents_;
  std::vector<std::string> order_;
  std::chrono::microseconds latency_{0};
};

struct SwapStats {
  std::size_t swap_in = 0;
  std::size_t swap_out = 0;
  std::size_t allocs = 0;
  std::size_t drops = 0;
  std::size_t peak_resident_bytes = 0;
  /// steps whose required transfers were not finished when compute arrived
  std::size_t stalls = 0;
  double stall_seconds = 0.0;
  std::size_t wps_ops = 0;
  std::size_t tps_ops = 0;
};

/**
 * Cache pool plus loader thread. Compute calls begin(p) before the step at
 * schedule position p, resolves views, and calls end_iteration() after the
 * last step. The loader processes one FIFO; compute blocks only on the
 * operations a step actually needs.
 */
class SwapEngine {
public:
  SwapEngine(SwapSchedule schedule, const std::vector<TensorSpec> &tensors,
             SwapStore &store);
  ~SwapEngine();
  SwapEngine(const SwapEngine &) = delete;
  SwapEngine &operator=(const SwapEngine &) = delete;

  /// Enqueues issue[p] and waits for every operation needed at p.
  void begin(std::size_t position);
  /// Enqueues the final evictions and waits until the cache is empty.
  void end_iteration();

  /// View of a resident tensor; throws AccessError if it is not resident.
  std::span<float> view(std::string_view name, int eo) const;

  const SwapSchedule &schedule() const noexcept { return schedule_; }
  SwapStats stats() const;
  std::size_t resident_bytes() const;

private:
  struct Item {
    const SwapOp *op;
    std::size_t seq;
  };

  void run();
  void execute(const SwapOp &op);
  void wait_for(std::size_t seq);

  SwapSchedule schedule_;
  const std::vector<TensorSpec> &tensors_;
  SwapStore &store_;
  /// per position: sequence number (within an iteration) to wait for
  std::vector<std::size_t> wait_seq_;
  std::vector<std::size_t> first_seq_;

  mutable std::mutex mu_;
  std::condition_variable queue_cv_;
  std::condition_variable done_cv_;
  std::deque<Item> queue_;
  std::size_t done_ = 0;
  std::size_t base_ = 0; ///< sequence offset of the current iteration
  std::size_t next_ = 0; ///< next position expected by begin()
  bool stop_ = false;
  std::exception_ptr error_;
  std::map<std::string, AlignedBuffer, std::less<>> resident_;
  std::size_t resident_bytes_ = 0;
  SwapStats stats_;
  std::thread loader_;
};

} // namespace nnplan
