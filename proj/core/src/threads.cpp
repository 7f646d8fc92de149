#include "tsrq/threads.hpp"

#include <cstdlib>

#ifdef TSRQ_OPENMP
#include <omp.h>
#endif

namespace tsrq {

namespace {

int initial_threads() {
  if (const char* env = std::getenv("TSRQ_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
#ifdef TSRQ_OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

int g_threads = initial_threads();

}  // namespace

int max_threads() { return g_threads; }

void set_max_threads(int n) { g_threads = n < 1 ? 1 : n; }

}  // namespace tsrq
