#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <functional>
#include <optional>
#include <thread>
#include <vector>

namespace depthlens {

// Worker count: an explicit request wins, then DEPTHLENS_THREADS, then 1.
std::size_t resolve_threads(std::optional<std::size_t> requested);

// Runs fn(begin, end, block_index) over [0, count) split into fixed blocks of
// `block` items. Block boundaries depend only on `count` and `block`, never on
// `threads`, so per-block partial results can be merged in block order to get
// thread-count-independent output. The exception from the lowest failing block
// is rethrown.
template <typename Fn>
void parallel_blocks(std::size_t count, std::size_t block, std::size_t threads, Fn&& fn) {
  if (count == 0) return;
  block = std::max<std::size_t>(block, 1);
  const std::size_t num_blocks = (count + block - 1) / block;
  std::vector<std::exception_ptr> errors(num_blocks);
  auto run_block = [&](std::size_t b) {
    try {
      const std::size_t begin = b * block;
      fn(begin, std::min(count, begin + block), b);
    } catch (...) {
      errors[b] = std::current_exception();
    }
  };
  const std::size_t workers = std::min(std::max<std::size_t>(threads, 1), num_blocks);
  if (workers == 1) {
    for (std::size_t b = 0; b < num_blocks; ++b) run_block(b);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t b = next++; b < num_blocks; b = next++) run_block(b);
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace depthlens
