#ifndef SEMIDYN_PARALLEL_HPP
#define SEMIDYN_PARALLEL_HPP

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace semidyn {

/// Runs body(k) for k in [0, count) on up to `threads` workers.
///
/// Work is split into contiguous chunks. Each index writes only its own
/// output slot, so results do not depend on the thread count. The first
/// exception (lowest index) is rethrown after all workers join.
template <class Body> void parallel_for(std::size_t count, int threads, Body &&body) {
  const std::size_t workers =
      std::min<std::size_t>(count, static_cast<std::size_t>(std::max(threads, 1)));
  if (workers <= 1) {
    for (std::size_t k = 0; k < count; ++k)
      body(k);
    return;
  }
  std::vector<std::exception_ptr> errors(count);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::size_t chunk = (count + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(count, begin + chunk);
    pool.emplace_back([&, begin, end] {
      for (std::size_t k = begin; k < end; ++k) {
        try {
          body(k);
        } catch (...) {
          errors[k] = std::current_exception();
        }
      }
    });
  }
  for (auto &t : pool)
    t.join();
  for (auto &e : errors)
    if (e)
      std::rethrow_exception(e);
}

} // namespace semidyn

#endif // SEMIDYN_PARALLEL_HPP
