// SPDX-License-Identifier: Apache-2.0
/**
 * @file   swap.cpp
 * @brief  Swap scheduling, backing store and loader
 */
#include <nnplan/swap.hpp>

#include <nnplan/error.hpp>

#include <algorithm>
#include <bit>
#include <cerrno>
#include <cstring>
#include <fcntl.h>
#include <optional>
#include <set>
#include <stdexcept>
#include <unistd.h>

static_assert(std::endian::native == std::endian::little,
              "swap store format assumes a little-endian host");

namespace nnplan {

std::string_view to_string(SwapAction action) {
  switch (action) {
  case SwapAction::load:
    return "load";
  case SwapAction::alloc:
    return "alloc";
  case SwapAction::store:
    return "store";
  case SwapAction::drop:
    return "drop";
  }
  return "?";
}

std::string_view to_string(SwapStream stream) {
  return stream == SwapStream::wps ? "WPS" : "TPS";
}

std::size_t SwapSchedule::count(SwapAction action) const {
  std::size_t n = 0;
  for (auto &ops : issue)
    for (auto &op : ops)
      n += op.action == action;
  return n;
}

std::size_t SwapSchedule::resident_bytes(std::size_t position) const {
  std::size_t total = 0;
  for (auto &name : resident.at(position))
    total += bytes.at(name);
  return total;
}

std::size_t SwapSchedule::peak_resident_bytes() const {
  std::size_t peak = 0;
  for (std::size_t p = 0; p < resident.size(); ++p)
    peak = std::max(peak, resident_bytes(p));
  return peak;
}

std::vector<std::string> SwapSchedule::prefetch(std::size_t position) const {
  std::vector<std::string> out;
  for (auto &op : issue.at(position))
    if (op.action == SwapAction::load || op.action == SwapAction::alloc)
      out.push_back(op.tensor);
  return out;
}

std::vector<std::string> SwapSchedule::offload(std::size_t position) const {
  std::vector<std::string> out;
  for (auto &op : issue.at(position))
    if (op.action == SwapAction::store || op.action == SwapAction::drop)
      out.push_back(op.tensor);
  return out;
}

SwapSchedule build_swap_schedule(const ExecPlan &plan,
                                 const std::vector<TensorSpec> &tensors,
                                 SwapKind mode, int lookahead) {
  SwapSchedule s;
  s.mode = mode;
  s.lookahead = lookahead;
  if (mode == SwapKind::off)
    return s;
  if (mode == SwapKind::proactive && lookahead < 1)
    throw std::invalid_argument("proactive swap needs lookahead >= 1");

  std::map<std::string, const TensorSpec *> roots;
  for (auto &t : tensors)
    if (t.is_root()) {
      roots[t.name] = &t;
      s.bytes[t.name] = t.bytes();
    }

  struct Use {
    bool reads = false;
    bool writes = false;
  };
  std::map<int, std::map<std::string, Use>> by_eo;
  for (auto &step : plan.steps) {
    auto &uses = by_eo[step.eo];
    for (auto &a : step.accesses) {
      auto &u = uses[root_of(tensors, a.tensor).name];
      u.reads |= a.mode != Access::write;
      u.writes |= a.mode != Access::read;
    }
  }
  std::vector<std::map<std::string, Use>> access;
  for (auto &[eo, uses] : by_eo) {
    s.eos.push_back(eo);
    access.push_back(uses);
  }
  const std::size_t P = s.eos.size();
  const std::size_t k =
    mode == SwapKind::proactive ? static_cast<std::size_t>(lookahead) : 0;

  auto first_use = [&](const std::string &name,
                       std::size_t from) -> std::optional<std::size_t> {
    for (std::size_t q = from; q < P; ++q)
      if (access[q].count(name))
        return q;
    return std::nullopt;
  };
  auto stream_of = [&](const std::string &name) {
    return roots.at(name)->role == TensorRole::weight ? SwapStream::wps
                                                      : SwapStream::tps;
  };

  s.resident.resize(P);
  s.issue.resize(P + 1);
  std::set<std::string> cur;
  std::map<std::string, bool> dirty;
  for (std::size_t p = 0; p <= P; ++p) {
    // The window only pulls in data: a tensor whose next use reads it is
    // prefetched, one already cached stays, and a write-first tensor waits
    // for its own step since allocating early hides no I/O. Every cached
    // tensor is therefore live, which keeps the cache within the arena.
    std::set<std::string> target;
    if (p < P) {
      for (auto &[name, use] : access[p])
        target.insert(name);
      for (std::size_t q = p + 1; q <= std::min(p + k, P - 1); ++q)
        for (auto &[name, use] : access[q])
          if (!target.count(name) && first_use(name, p) == q &&
              (use.reads || cur.count(name)))
            target.insert(name);
    }

    auto &ops = s.issue[p];
    for (auto &name : cur) {
      if (target.count(name))
        continue;
      SwapAction act;
      if (mode == SwapKind::on_demand) {
        act = SwapAction::store;
      } else {
        const bool needed_later =
          first_use(name, p).has_value() || roots.at(name)->persistent();
        act = dirty[name] && needed_later ? SwapAction::store
                                          : SwapAction::drop;
      }
      ops.push_back({act, name, stream_of(name), p});
    }
    for (auto &name : target) {
      if (cur.count(name))
        continue;
      const auto q = *first_use(name, p);
      SwapAction act = SwapAction::load;
      if (mode != SwapKind::on_demand && !access[q].at(name).reads)
        act = SwapAction::alloc;
      ops.push_back({act, name, stream_of(name), q});
      dirty[name] = false;
    }

    if (p < P) {
      for (auto &[name, use] : access[p])
        if (use.writes)
          dirty[name] = true;
      s.resident[p].assign(target.begin(), target.end());
    }
    cur = std::move(target);
  }
  return s;
}

// ---------------------------------------------------------------------------
// SwapStore

namespace {

constexpr char store_magic[8] = {'N', 'N', 'P', 'S', 'W', 'A', 'P', '1'};
constexpr std::uint64_t store_align = 64;

std::string errno_text() { return std::strerror(errno); }

void put(std::string &buf, const void *p, std::size_t n) {
  buf.append(static_cast<const char *>(p), n);
}

void pwrite_all(int fd, const void *data, std::size_t n, std::uint64_t off,
                const std::string &tensor, int eo) {
  auto *p = static_cast<const char *>(data);
  while (n > 0) {
    auto w = ::pwrite(fd, p, n, static_cast<off_t>(off));
    if (w < 0) {
      if (errno == EINTR)
        continue;
      throw StorageError(tensor, eo, "write failed: " + errno_text());
    }
    p += w;
    n -= static_cast<std::size_t>(w);
    off += static_cast<std::uint64_t>(w);
  }
}

void pread_all(int fd, void *data, std::size_t n, std::uint64_t off,
               const std::string &tensor, int eo) {
  auto *p = static_cast<char *>(data);
  while (n > 0) {
    auto r = ::pread(fd, p, n, static_cast<off_t>(off));
    if (r < 0) {
      if (errno == EINTR)
        continue;
      throw StorageError(tensor, eo, "read failed: " + errno_text());
    }
    if (r == 0)
      throw StorageError(tensor, eo, "short read (store truncated)");
    p += r;
    n -= static_cast<std::size_t>(r);
    off += static_cast<std::uint64_t>(r);
  }
}

} // namespace

SwapStore::SwapStore(
  std::filesystem::path path,
  const std::vector<std::pair<std::string, std::size_t>> &tensors) :
  path_(std::move(path)) {
  std::uint64_t header = sizeof(store_magic) + 4;
  for (auto &[name, bytes] : tensors)
    header += 4 + name.size() + 16;
  std::uint64_t off = (header + store_align - 1) / store_align * store_align;
  for (auto &[name, bytes] : tensors) {
    if (extents_.count(name))
      throw std::invalid_argument("swap store: duplicate tensor '" + name + "'");
    extents_[name] = {off, bytes};
    order_.push_back(name);
    off += (bytes + store_align - 1) / store_align * store_align;
  }

  std::string buf;
  put(buf, store_magic, sizeof(store_magic));
  const auto count = static_cast<std::uint32_t>(tensors.size());
  put(buf, &count, 4);
  for (auto &name : order_) {
    const auto len = static_cast<std::uint32_t>(name.size());
    put(buf, &len, 4);
    put(buf, name.data(), name.size());
    put(buf, &extents_[name].offset, 8);
    put(buf, &extents_[name].bytes, 8);
  }

  fd_ = ::open(path_.c_str(), O_RDWR | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd_ < 0)
    throw StorageError("", -1, "cannot create " + path_.string() + ": " +
                                 errno_text());
  if (::ftruncate(fd_, static_cast<off_t>(off)) != 0) {
    auto msg = errno_text();
    ::close(fd_);
    throw StorageError("", -1, "cannot size " + path_.string() + ": " + msg);
  }
  pwrite_all(fd_, buf.data(), buf.size(), 0, "", -1);
}

SwapStore::SwapStore(std::filesystem::path path) : path_(std::move(path)) {
  fd_ = ::open(path_.c_str(), O_RDONLY | O_CLOEXEC);
  if (fd_ < 0)
    throw StorageError("", -1, "cannot open " + path_.string() + ": " +
                                 errno_text());
  try {
    char magic[sizeof(store_magic)];
    std::uint64_t off = 0;
    auto read = [&](void *p, std::size_t n) {
      pread_all(fd_, p, n, off, "", -1);
      off += n;
    };
    read(magic, sizeof(magic));
    if (std::memcmp(magic, store_magic, sizeof(magic)) != 0)
      throw StorageError("", -1, path_.string() + " is not a tensor store");
    std::uint32_t count = 0;
    read(&count, 4);
    for (std::uint32_t i = 0; i < count; ++i) {
      std::uint32_t len = 0;
      read(&len, 4);
      if (len > 4096)
        throw StorageError("", -1, "corrupt store index");
      std::string name(len, '\0');
      read(name.data(), len);
      Extent e;
      read(&e.offset, 8);
      read(&e.bytes, 8);
      extents_[name] = e;
      order_.push_back(std::move(name));
    }
  } catch (...) {
    ::close(fd_);
    throw;
  }
}

SwapStore::~SwapStore() {
  if (fd_ >= 0)
    ::close(fd_);
}

bool SwapStore::contains(const std::string &name) const {
  return extents_.count(name) != 0;
}

const SwapStore::Extent &SwapStore::extent(const std::string &name,
                                           std::size_t elems, int eo) const {
  auto it = extents_.find(name);
  if (it == extents_.end())
    throw StorageError(name, eo, "no extent in the store");
  if (it->second.bytes != elems * sizeof(float))
    throw StorageError(name, eo, "size mismatch with the store extent");
  return it->second;
}

void SwapStore::write(const std::string &name, std::span<const float> data,
                      int eo) {
  const auto &e = extent(name, data.size(), eo);
  if (latency_.count() > 0)
    std::this_thread::sleep_for(latency_);
  pwrite_all(fd_, data.data(), e.bytes, e.offset, name, eo);
}

void SwapStore::read(const std::string &name, std::span<float> data,
                     int eo) const {
  const auto &e = extent(name, data.size(), eo);
  if (latency_.count() > 0)
    std::this_thread::sleep_for(latency_);
  pread_all(fd_, data.data(), e.bytes, e.offset, name, eo);
}

void SwapStore::save(
  const std::filesystem::path &path,
  const std::vector<std::pair<std::string, std::span<const float>>> &tensors) {
  std::vector<std::pair<std::string, std::size_t>> sizes;
  for (auto &[name, data] : tensors)
    sizes.emplace_back(name, data.size_bytes());
  SwapStore store(path, sizes);
  for (auto &[name, data] : tensors)
    store.write(name, data);
}

std::map<std::string, std::vector<float>>
SwapStore::load(const std::filesystem::path &path) {
  SwapStore store(path);
  std::map<std::string, std::vector<float>> out;
  for (auto &name : store.names()) {
    std::vector<float> v(store.extents().at(name).bytes / sizeof(float));
    store.read(name, v);
    out[name] = std::move(v);
  }
  return out;
}

// ---------------------------------------------------------------------------
// SwapEngine

SwapEngine::SwapEngine(SwapSchedule schedule,
                       const std::vector<TensorSpec> &tensors,
                       SwapStore &store) :
  schedule_(std::move(schedule)), tensors_(tensors), store_(store) {
  if (schedule_.empty())
    throw std::invalid_argument("swap engine needs a non-empty schedule");
  for (auto &[name, bytes] : schedule_.bytes)
    if (!store_.contains(name))
      throw StorageError(name, -1, "missing from the swap store");

  const std::size_t positions = schedule_.issue.size();
  std::vector<std::size_t> need(positions, 0);
  std::size_t seq = 0;
  first_seq_.resize(positions);
  for (std::size_t p = 0; p < positions; ++p) {
    first_seq_[p] = seq;
    for (auto &op : schedule_.issue[p]) {
      ++seq;
      auto &n = need[std::min(op.needed_at, positions - 1)];
      n = std::max(n, seq);
    }
  }
  wait_seq_.resize(positions);
  std::size_t running = 0;
  for (std::size_t p = 0; p < positions; ++p) {
    running = std::max(running, need[p]);
    wait_seq_[p] = running;
  }
  wait_seq_.back() = seq;

  loader_ = std::thread([this] { run(); });
}

SwapEngine::~SwapEngine() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  queue_cv_.notify_all();
  loader_.join();
}

void SwapEngine::begin(std::size_t position) {
  if (position != next_ || position + 1 >= schedule_.issue.size())
    throw std::logic_error("swap engine: positions must be visited in order");
  {
    std::lock_guard lock(mu_);
    for (std::size_t i = 0; i < schedule_.issue[position].size(); ++i)
      queue_.push_back({&schedule_.issue[position][i],
                        base_ + first_seq_[position] + i});
  }
  queue_cv_.notify_one();
  ++next_;
  wait_for(base_ + wait_seq_[position]);
}

void SwapEngine::end_iteration() {
  const std::size_t last = schedule_.issue.size() - 1;
  if (next_ != last)
    throw std::logic_error("swap engine: iteration ended early");
  {
    std::lock_guard lock(mu_);
    for (std::size_t i = 0; i < schedule_.issue[last].size(); ++i)
      queue_.push_back({&schedule_.issue[last][i], base_ + first_seq_[last] + i});
  }
  queue_cv_.notify_one();
  wait_for(base_ + wait_seq_[last]);
  base_ += wait_seq_[last];
  next_ = 0;
  std::lock_guard lock(mu_);
  if (!resident_.empty())
    throw std::logic_error("swap engine: cache not empty after iteration");
}

void SwapEngine::wait_for(std::size_t seq) {
  std::unique_lock lock(mu_);
  if (error_)
    std::rethrow_exception(error_);
  if (done_ >= seq)
    return;
  ++stats_.stalls;
  const auto t0 = std::chrono::steady_clock::now();
  done_cv_.wait(lock, [&] { return done_ >= seq || error_; });
  stats_.stall_seconds +=
    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
  if (error_)
    std::rethrow_exception(error_);
}

void SwapEngine::run() {
  for (;;) {
    Item item;
    {
      std::unique_lock lock(mu_);
      queue_cv_.wait(lock, [&] { return stop_ || !queue_.empty(); });
      if (stop_)
        return;
      item = queue_.front();
      queue_.pop_front();
      if (error_)
        continue;
    }
    try {
      execute(*item.op);
    } catch (...) {
      std::lock_guard lock(mu_);
      error_ = std::current_exception();
      done_cv_.notify_all();
      continue;
    }
    {
      std::lock_guard lock(mu_);
      done_ = item.seq + 1;
    }
    done_cv_.notify_all();
  }
}

void SwapEngine::execute(const SwapOp &op) {
  const auto &eos = schedule_.eos;
  const int eo = eos.empty() ? -1 : eos[std::min(op.needed_at, eos.size() - 1)];
  const std::size_t bytes = schedule_.bytes.at(op.tensor);
  auto counted = [&] {
    (op.stream == SwapStream::wps ? stats_.wps_ops : stats_.tps_ops)++;
  };

  switch (op.action) {
  case SwapAction::load:
  case SwapAction::alloc: {
    AlignedBuffer buf(bytes);
    if (op.action == SwapAction::load)
      store_.read(op.tensor, buf.floats(), eo);
    std::lock_guard lock(mu_);
    if (resident_.count(op.tensor))
      throw std::logic_error("swap: '" + op.tensor + "' is already resident");
    resident_.emplace(op.tensor, std::move(buf));
    resident_bytes_ += bytes;
    stats_.peak_resident_bytes =
      std::max(stats_.peak_resident_bytes, resident_bytes_);
    if (op.action == SwapAction::load) {
      ++stats_.swap_in;
      counted();
    } else {
      ++stats_.allocs;
    }
    break;
  }
  case SwapAction::store:
  case SwapAction::drop: {
    std::span<float> data;
    {
      std::lock_guard lock(mu_);
      auto it = resident_.find(op.tensor);
      if (it == resident_.end())
        throw std::logic_error("swap: '" + op.tensor + "' is not resident");
      data = it->second.floats();
    }
    if (op.action == SwapAction::store)
      store_.write(op.tensor, data, eo);
    std::lock_guard lock(mu_);
    resident_.erase(op.tensor);
    resident_bytes_ -= bytes;
    if (op.action == SwapAction::store) {
      ++stats_.swap_out;
      counted();
    } else {
      ++stats_.drops;
    }
    break;
  }
  }
}

std::span<float> SwapEngine::view(std::string_view name, int eo) const {
  const auto &spec = find_tensor(tensors_, name);
  const auto &root = root_of(tensors_, name);
  std::lock_guard lock(mu_);
  auto it = resident_.find(root.name);
  if (it == resident_.end())
    throw AccessError("tensor '" + std::string(name) + "' is not resident at EO " +
                      std::to_string(eo));
  auto &buf = const_cast<AlignedBuffer &>(it->second);
  return buf.floats().first(spec.dim.count());
}

SwapStats SwapEngine::stats() const {
  std::lock_guard lock(mu_);
  return stats_;
}

std::size_t SwapEngine::resident_bytes() const {
  std::lock_guard lock(mu_);
  return resident_bytes_;
}

} // namespace nnplan
