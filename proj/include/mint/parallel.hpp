#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace mint {

inline int& thread_count_setting() {
  static int n = [] {
    if (const char* env = std::getenv("MINT_THREADS")) {
      const int v = std::atoi(env);
      if (v > 0) return v;
    }
    return 1;
  }();
  return n;
}

inline void set_thread_count(int n) { thread_count_setting() = std::max(1, n); }
inline int thread_count() { return thread_count_setting(); }

// Runs fn(i) for i in [0, n). Callers write results into slot i so the
// reduction order never depends on scheduling.
template <typename Fn>
void parallel_for(size_t n, Fn&& fn) {
  const size_t workers = std::min(n, static_cast<size_t>(thread_count()));
  if (workers <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace mint
