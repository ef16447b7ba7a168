#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace tfm {

namespace detail {

inline std::atomic<std::size_t>& thread_override() {
  static std::atomic<std::size_t> value{0};
  return value;
}

inline bool& inside_worker() {
  thread_local bool flag = false;
  return flag;
}

inline std::size_t env_thread_limit() {
  static const std::size_t limit = [] {
    if (const char* env = std::getenv("TFM_THREADS")) {
      try {
        const long v = std::stol(env);
        if (v >= 1) return static_cast<std::size_t>(v);
      } catch (...) {
      }
    }
    return std::size_t{0};
  }();
  return limit;
}

}  // namespace detail

/// Worker count used by parallel_for: set_thread_count() override, else
/// TFM_THREADS, else the hardware concurrency.
inline std::size_t thread_count() {
  if (std::size_t v = detail::thread_override().load(); v > 0) return v;
  if (std::size_t v = detail::env_thread_limit(); v > 0) return v;
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// 0 restores the environment/hardware default.
inline void set_thread_count(std::size_t n) { detail::thread_override().store(n); }

/// Calls fn(i) for every i in [0, n). Each index must write disjoint output;
/// under that rule results do not depend on the worker count. Nested calls
/// run inline on the calling worker.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min(thread_count(), n);
  if (workers <= 1 || detail::inside_worker()) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = n * w / workers;
    const std::size_t end = n * (w + 1) / workers;
    pool.emplace_back([&, begin, end] {
      detail::inside_worker() = true;
      try {
        for (std::size_t i = begin; i < end; ++i) fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace tfm
