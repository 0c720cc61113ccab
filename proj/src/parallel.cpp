#include "mpseg/parallel.hpp"

#include <atomic>
#include <cstdlib>

namespace mpseg {

namespace {

int from_env() {
    const char* env = std::getenv("MPSEG_THREADS");
    if (env == nullptr) {
        return 1;
    }
    const int n = std::atoi(env);
    return n > 0 ? n : 1;
}

std::atomic<int>& threads() {
    static std::atomic<int> value{from_env()};
    return value;
}

} // namespace

int thread_count() { return threads().load(); }

void set_thread_count(int n) { threads().store(n > 0 ? n : 1); }

} // namespace mpseg
