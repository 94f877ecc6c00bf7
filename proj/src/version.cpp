#include "stitch/version.hpp"

#include <malloc.h>

namespace {
// Large tensor buffers churn every step; keeping them inside the arena
// instead of mmap/munmap cycles avoids the kernel re-zeroing pages.
struct MallocTuning {
    MallocTuning() {
        mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
        mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
    }
} malloc_tuning;
}  // namespace

namespace stitch {

const char* git_describe() {
#ifdef STITCH_GIT_DESCRIBE
    return STITCH_GIT_DESCRIBE;
#else
    return "unknown";
#endif
}

}  // namespace stitch
