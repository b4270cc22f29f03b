#pragma once

#include <cstddef>

namespace dpt::vmath {

// In-place elementwise exp / erf over a contiguous buffer. Uses the glibc
// vector math library when built for AVX-512, scalar libm otherwise.
void exp_inplace(double* x, std::size_t n);
void erf_inplace(double* x, std::size_t n);

}  // namespace dpt::vmath
