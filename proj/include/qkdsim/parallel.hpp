#pragma once

#include <atomic>

namespace qkdsim {

/// Number of worker threads to use: min(requested, hardware, QKDSIM_THREADS).
/// requested <= 0 means "as many as allowed".
int worker_count(int requested = 0);

}  // namespace qkdsim
