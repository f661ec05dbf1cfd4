// NEON (AArch64) variants: two doubles per register, fused multiply-add throughout.

#include "alp/numcore/kernels.hpp"

#include <arm_neon.h>
#include <cmath>

namespace alp::num::kernels::detail {
namespace {

inline void fma_row(double s, const double* b, double* c, std::size_t n)
{
    const float64x2_t vs = vdupq_n_f64(s);
    std::size_t j = 0;
    for (; j + 2 <= n; j += 2) {
        vst1q_f64(c + j, vfmaq_f64(vld1q_f64(c + j), vs, vld1q_f64(b + j)));
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

double dot(const double* x, const double* y, std::size_t n)
{
    float64x2_t acc = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        acc = vfmaq_f64(acc, vld1q_f64(x + i), vld1q_f64(y + i));
    }
    double s = vaddvq_f64(acc);
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
        for (std::size_t i = 0; i < m; ++i) {
            fma_row(a[p * m + i], b + p * n, c + i * n, n);
        }
    }
}

void axpy(double alpha, const double* x, double* y, std::size_t n)
{
    fma_row(alpha, x, y, n);
}

} // namespace

const KernelTable neon_table{Isa::neon, &gemm_nn, &gemm_nt, &gemm_tn, &dot, &axpy};

} // namespace alp::num::kernels::detail
