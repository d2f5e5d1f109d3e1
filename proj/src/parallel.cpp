#include "qkdsim/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>

namespace qkdsim {

int worker_count(int requested) {
  int n = requested > 0 ? requested : 1 << 20;
  const unsigned hw = std::thread::hardware_concurrency();
  n = std::min<int>(n, hw > 0 ? static_cast<int>(hw) : 1);
  if (const char* env = std::getenv("QKDSIM_THREADS")) {
    const int cap = std::atoi(env);
    if (cap > 0) n = std::min(n, cap);
  }
  return std::max(1, n);
}

}  // namespace qkdsim
