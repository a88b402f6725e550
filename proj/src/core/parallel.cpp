#include "phieat/core/parallel.hpp"

#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace phieat {

int worker_count() {
  int hw = int(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  if (const char* env = std::getenv("PHIEAT_THREADS")) {
    int cap = std::atoi(env);
    if (cap >= 1 && cap < hw) hw = cap;
  }
  return hw;
}

void parallel_chunks(int n, int chunks, const std::function<void(int, int, int)>& fn) {
  if (n <= 0) return;
  if (chunks > n) chunks = n;
  if (chunks < 1) chunks = 1;

  auto run_chunk = [&](int c) {
    // same split for any worker count
    int begin = int(int64_t(n) * c / chunks);
    int end = int(int64_t(n) * (c + 1) / chunks);
    if (begin < end) fn(begin, end, c);
  };

  int workers = std::min(worker_count(), chunks);
  if (workers <= 1) {
    for (int c = 0; c < chunks; ++c) run_chunk(c);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        int c = next.fetch_add(1);
        if (c >= chunks) return;
        run_chunk(c);
      }
    });
  }
  for (auto& t : pool) t.join();
}

void parallel_for(int n, const std::function<void(int)>& fn) {
  parallel_chunks(n, n, [&](int begin, int end, int) {
    for (int i = begin; i < end; ++i) fn(i);
  });
}

}  // namespace phieat
