#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace ohf {

// Process-wide worker count for kernel-level parallelism, set once by the CLI
// (--threads / OHF_THREADS). Work is always split into fixed contiguous index
// ranges and every output element is written by exactly one worker with the
// same per-element accumulation order as the serial path, so results do not
// depend on the thread count.
inline std::atomic<int>& thread_count_slot() {
  static std::atomic<int> n{1};
  return n;
}

inline int thread_count() { return thread_count_slot().load(std::memory_order_relaxed); }
inline void set_thread_count(int n) { thread_count_slot().store(n < 1 ? 1 : n, std::memory_order_relaxed); }

// Runs fn(begin, end) over a partition of [0, n).
inline void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
  const int workers = thread_count();
  if (workers <= 1 || n < 2) {
    fn(0, n);
    return;
  }
  const int used = static_cast<int>(n < workers ? n : workers);
  const std::int64_t chunk = (n + used - 1) / used;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(used - 1));
  for (int w = 1; w < used; ++w) {
    const std::int64_t b = w * chunk;
    const std::int64_t e = std::min<std::int64_t>(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(0, std::min<std::int64_t>(n, chunk));
  for (auto& t : pool) t.join();
}

}  // namespace ohf
