#pragma once

namespace tsrq {

// Worker thread cap for data-parallel kernels. Defaults to the TSRQ_THREADS
// environment variable when set, otherwise to the OpenMP default. Kernels
// partition work so each output element is produced by exactly one thread in
// a fixed summation order, so results are bit-identical for any thread count.
int max_threads();
void set_max_threads(int n);

}  // namespace tsrq
