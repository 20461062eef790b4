#include "erienet/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace erienet {
namespace {

std::atomic<std::size_t> g_override{0};

std::size_t env_threads() {
  static const std::size_t value = [] {
    std::size_t n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("ERIENET_THREADS")) {
      try {
        long v = std::stol(env);
        if (v > 0) n = static_cast<std::size_t>(v);
      } catch (const std::exception&) {
        // malformed value: keep the hardware default
      }
    }
    return n;
  }();
  return value;
}

}  // namespace

std::size_t max_threads() {
  std::size_t o = g_override.load(std::memory_order_relaxed);
  return o > 0 ? o : env_threads();
}

void set_max_threads(std::size_t n) { g_override.store(n, std::memory_order_relaxed); }

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(max_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(worker);
  worker();
  pool.clear();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace erienet
