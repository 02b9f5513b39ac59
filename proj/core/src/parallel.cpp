#include "nnm/parallel.hpp"

#include <atomic>
#include <cstdlib>
#include <thread>

namespace nnm {

namespace {

int env_threads() {
  const char* s = std::getenv("NNM_THREADS");
  if (!s || !*s) return 0;
  const long v = std::strtol(s, nullptr, 10);
  return v > 0 ? static_cast<int>(v) : 0;
}

std::atomic<int> g_max_threads{0};  // 0 = unset
std::atomic<bool> g_deterministic{false};

}  // namespace

void set_max_threads(int n) { g_max_threads.store(n > 0 ? n : 0, std::memory_order_relaxed); }

int max_threads() {
  if (g_deterministic.load(std::memory_order_relaxed)) return 1;
  int n = g_max_threads.load(std::memory_order_relaxed);
  if (n == 0) n = env_threads();
  if (n == 0) {
    const unsigned hw = std::thread::hardware_concurrency();
    n = hw > 0 ? static_cast<int>(hw) : 1;
  }
  return n;
}

void set_deterministic(bool on) { g_deterministic.store(on, std::memory_order_relaxed); }
bool deterministic() { return g_deterministic.load(std::memory_order_relaxed); }

namespace detail {
int resolve_threads(std::int64_t work_items) {
  const int cap = max_threads();
  if (cap <= 1 || work_items <= 1) return 1;
  return work_items < cap ? static_cast<int>(work_items) : cap;
}
}  // namespace detail

}  // namespace nnm
