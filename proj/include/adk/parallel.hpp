#pragma once

#include <cstdint>
#include <cstdlib>
#include <thread>
#include <vector>

namespace adk {

inline int num_threads() {
  static int n = [] {
    if (const char* env = std::getenv("ADK_THREADS")) {
      int v = std::atoi(env);
      if (v > 0) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
  }();
  return n;
}

// Static-partition parallel loop over [0, n). Tasks must write disjoint
// outputs; results are then independent of the partition, so seeded runs
// stay bitwise reproducible at any thread count.
template <typename F>
void parallel_for(std::int64_t n, F&& fn) {
  int workers = num_threads();
  if (workers <= 1 || n <= 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  if (workers > n) workers = static_cast<int>(n);
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  std::int64_t chunk = (n + workers - 1) / workers;
  for (int w = 1; w < workers; ++w) {
    std::int64_t lo = w * chunk;
    std::int64_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (std::int64_t i = 0; i < std::min(n, chunk); ++i) fn(i);
  for (auto& t : pool) t.join();
}

}  // namespace adk
