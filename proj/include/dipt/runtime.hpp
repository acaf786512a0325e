#pragma once

#include <cstddef>
#include <cstdlib>
#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace dipt {

/// Keeps freed tensor buffers in the heap instead of returning them to the OS.
/// Training allocates and frees the same large buffers every step, and glibc's
/// default mmap threshold turns each of those into page faults.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 64 << 20);
#endif
}

/// Evaluation worker count from DIPT_THREADS (default 1).
inline std::size_t eval_threads_from_env() {
    const char* v = std::getenv("DIPT_THREADS");
    if (v == nullptr) return 1;
    try {
        const long n = std::stol(v);
        return n > 0 ? static_cast<std::size_t>(n) : 1;
    } catch (...) {
        return 1;
    }
}

}  // namespace dipt
