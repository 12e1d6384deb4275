#pragma once

// Static-chunked parallel loop. Each index is handled by exactly one worker,
// so results written per index are independent of the thread count.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace ustray {

namespace detail {
inline std::atomic<unsigned>& thread_setting() {
  static std::atomic<unsigned> n{0};
  return n;
}
}  // namespace detail

/// 0 selects std::thread::hardware_concurrency().
inline void set_num_threads(unsigned n) { detail::thread_setting() = n; }

inline unsigned num_threads() {
  unsigned n = detail::thread_setting();
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  return n;
}

template <class F>
void parallel_for(std::size_t count, F&& body) {
  const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(num_threads(), count));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      const std::size_t lo = count * w / workers;
      const std::size_t hi = count * (w + 1) / workers;
      try {
        for (std::size_t i = lo; i < hi; ++i) body(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace ustray
