#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace fedenergy {

inline std::size_t default_jobs() {
  const unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : n;
}

/// Calls fn(i) for i in [0, count) on up to `jobs` threads. Work items must write
/// only to their own slot; the first exception in index order is rethrown.
template <typename Fn>
void parallel_for(std::size_t jobs, std::size_t count, Fn&& fn) {
  if (jobs <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(count);
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t k = 0; k < std::min(jobs, count); ++k) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

template <typename T, typename Fn>
std::vector<T> parallel_map(std::size_t jobs, std::size_t count, Fn&& fn) {
  std::vector<T> out(count);
  parallel_for(jobs, count, [&](std::size_t i) { out[i] = fn(i); });
  return out;
}

}  // namespace fedenergy
