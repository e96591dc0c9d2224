#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace thinlayer {

namespace detail {
inline std::atomic<int>& thread_setting() {
  static std::atomic<int> n{0};
  return n;
}
}  // namespace detail

// 0 means "use THINLAYER_THREADS or 1".
inline void set_num_threads(int n) { detail::thread_setting() = std::max(0, n); }

inline int num_threads() {
  int n = detail::thread_setting();
  if (n > 0) return n;
  if (const char* env = std::getenv("THINLAYER_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  return 1;
}

// Runs fn(chunk, begin, end) over contiguous chunks of [0, n). Chunk
// boundaries depend only on n and the chunk count, so callers that reduce
// per-chunk results in chunk order get thread-count independent output as
// long as they use a fixed chunk count.
template <class Fn>
void parallel_chunks(int n, int chunks, Fn&& fn) {
  chunks = std::max(1, std::min(chunks, n));
  auto bounds = [&](int c) { return static_cast<int>(static_cast<long long>(n) * c / chunks); };
  const int workers = std::min(num_threads(), chunks);
  if (workers <= 1) {
    for (int c = 0; c < chunks; ++c) fn(c, bounds(c), bounds(c + 1));
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (int c = next++; c < chunks; c = next++) fn(c, bounds(c), bounds(c + 1));
    });
  for (auto& t : pool) t.join();
}

// Runs fn(i) for i in [0, n) on the worker pool.
template <class Fn>
void parallel_for(int n, Fn&& fn) {
  parallel_chunks(n, n, [&](int, int b, int e) {
    for (int i = b; i < e; ++i) fn(i);
  });
}

}  // namespace thinlayer
