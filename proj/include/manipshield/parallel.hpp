#pragma once

// Include this instead of <omp.h> so the kernels still build without OpenMP.

#if defined(_OPENMP)
#include <omp.h>
namespace manipshield {
inline constexpr bool kHaveOpenMP = true;
inline int max_threads() { return omp_get_max_threads(); }
inline void set_threads(int n) { omp_set_num_threads(n); }
}  // namespace manipshield
#else
namespace manipshield {
inline constexpr bool kHaveOpenMP = false;
inline int max_threads() { return 1; }
inline void set_threads(int) {}
}  // namespace manipshield
#endif
