#pragma once

#include <cstdint>

namespace nnm {

/// Caps the number of worker threads used inside kernels. 0 restores the
/// default (hardware concurrency, or the NNM_THREADS environment variable
/// when set).
void set_max_threads(int n);
int max_threads();

/// Force single-threaded kernels (the CLI's --deterministic). Kernels are
/// written so results are identical for any thread count; this removes even
/// scheduling variance.
void set_deterministic(bool on);
bool deterministic();

namespace detail {
int resolve_threads(std::int64_t work_items);
}

/// Runs fn(i) for i in [0, n). Every iteration writes only its own outputs;
/// reductions that cross iterations must be restructured by the caller
/// (fixed-block partials) so results do not depend on the thread count.
template <typename F>
void parallel_for(std::int64_t n, F&& fn) {
  if (n <= 0) return;
  const int threads = detail::resolve_threads(n);
  if (threads <= 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
#ifdef NNM_HAVE_OPENMP
#pragma omp parallel for schedule(static) num_threads(threads)
  for (std::int64_t i = 0; i < n; ++i) fn(i);
#else
  for (std::int64_t i = 0; i < n; ++i) fn(i);
#endif
}

}  // namespace nnm
