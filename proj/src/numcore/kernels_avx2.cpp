// AVX2 + FMA variants. This translation unit is compiled with -mavx2 -mfma; nothing here
// may run before the dispatcher has confirmed the CPU supports both.

#include "alp/numcore/kernels.hpp"

#include <cmath>
#include <immintrin.h>

namespace alp::num::kernels::detail {
namespace {

// Row update c[0..n) += s * b[0..n). Lanes and the scalar tail both use a single fused
// multiply-add per element so the result does not depend on where the tail starts.
inline void fma_row(double s, const double* b, double* c, std::size_t n)
{
    const __m256d vs = _mm256_set1_pd(s);
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
        __m256d c0 = _mm256_loadu_pd(c + j);
        __m256d c1 = _mm256_loadu_pd(c + j + 4);
        c0 = _mm256_fmadd_pd(vs, _mm256_loadu_pd(b + j), c0);
        c1 = _mm256_fmadd_pd(vs, _mm256_loadu_pd(b + j + 4), c1);
        _mm256_storeu_pd(c + j, c0);
        _mm256_storeu_pd(c + j + 4, c1);
    }
    for (; j + 4 <= n; j += 4) {
        __m256d c0 = _mm256_loadu_pd(c + j);
        c0 = _mm256_fmadd_pd(vs, _mm256_loadu_pd(b + j), c0);
        _mm256_storeu_pd(c + j, c0);
    }
    for (; j < n; ++j) {
        c[j] = std::fma(s, b[j], c[j]);
    }
}

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate)
{
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        if (!accumulate) {
            for (std::size_t j = 0; j < n; ++j) {
                ci[j] = 0.0;
            }
        }
        for (std::size_t p = 0; p < k; ++p) {
            fma_row(a[i * k + p], b + p * n, ci, n);
        }
    }
}

// Four independent lane accumulators, folded as (l0 + l2) + (l1 + l3), then the tail.
double dot(const double* x, const double* y, std::size_t n)
{
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        acc = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc);
    }
    const __m128d lo = _mm256_castpd256_pd128(acc);
    const __m128d hi = _mm256_extractf128_pd(acc, 1);
    const __m128d pair = _mm_add_pd(lo, hi);
    double s = _mm_cvtsd_f64(_mm_add_sd(pair, _mm_unpackhi_pd(pair, pair)));
    for (; i < n; ++i) {
        s = std::fma(x[i], y[i], s);
    }
    return s;
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate)
{
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double v = dot(a + i * k, b + j * k, k);
            c[i * n + j] = accumulate ? c[i * n + j] + v : v;
        }
    }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate)
{
    if (!accumulate) {
        for (std::size_t i = 0; i < m * n; ++i) {
            c[i] = 0.0;
        }
    }
    for (std::size_t p = 0; p < k; ++p) {
        const double* ap = a + p * m;
        const double* bp = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            fma_row(ap[i], bp, c + i * n, n);
        }
    }
}

void axpy(double alpha, const double* x, double* y, std::size_t n)
{
    fma_row(alpha, x, y, n);
}

} // namespace

const KernelTable avx2_table{Isa::avx2, &gemm_nn, &gemm_nt, &gemm_tn, &dot, &axpy};

} // namespace alp::num::kernels::detail
