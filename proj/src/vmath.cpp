#include "vmath.hpp"

#include <cmath>

#if defined(DPT_HAVE_LIBMVEC) && defined(__AVX512F__)
#include <immintrin.h>
extern "C" __m512d _ZGVeN8v_exp(__m512d);
extern "C" __m512d _ZGVeN8v_erf(__m512d);
#define DPT_VECTOR_MATH 1
#endif

namespace dpt::vmath {

#ifdef DPT_VECTOR_MATH
namespace {

template <__m512d (*F)(__m512d), double (*Scalar)(double)>
void apply(double* x, std::size_t n) {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) _mm512_storeu_pd(x + i, F(_mm512_loadu_pd(x + i)));
    for (; i < n; ++i) x[i] = Scalar(x[i]);
}

double scalar_exp(double v) { return std::exp(v); }
double scalar_erf(double v) { return std::erf(v); }

}  // namespace

void exp_inplace(double* x, std::size_t n) { apply<_ZGVeN8v_exp, scalar_exp>(x, n); }
void erf_inplace(double* x, std::size_t n) { apply<_ZGVeN8v_erf, scalar_erf>(x, n); }
#else
void exp_inplace(double* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] = std::exp(x[i]);
}
void erf_inplace(double* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] = std::erf(x[i]);
}
#endif

}  // namespace dpt::vmath
