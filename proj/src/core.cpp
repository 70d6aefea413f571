#include "splatflow/core.hpp"

#include <cstdlib>
#include <thread>

namespace splatflow {

int thread_count() {
    if (const char *env = std::getenv("SPLATFLOW_THREADS")) {
        int n = std::atoi(env);
        if (n > 0) return n;
    }
    return 1;
}

}  // namespace splatflow
