#pragma once

// Dense inner-loop kernels with a scalar reference and SIMD variants chosen at runtime.
//
// Every kernel fixes the summation order of an output element as a function of the
// reduction length only, never of the surrounding matrix extents. A row computed as part
// of a tall matrix is therefore bit-identical to the same row computed on its own, which
// the engines rely on when replaying sampled prefixes.

#include <cstddef>
#include <string_view>

namespace alp::num::kernels {

enum class Isa { scalar, avx2, neon };

std::string_view isa_name(Isa isa);

struct KernelTable {
    Isa isa;
    // C[m x n] (+)= A[m x k] * B[k x n]
    void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
                    bool accumulate);
    // C[m x n] (+)= A[m x k] * B[n x k]^T
    void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
                    bool accumulate);
    // C[m x n] (+)= A[k x m]^T * B[k x n]
    void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
                    bool accumulate);
    double (*dot)(const double* x, const double* y, std::size_t n);
    // y += alpha * x
    void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
};

/// True when the running CPU can execute the given variant.
bool isa_available(Isa isa);

/// Kernel table for a specific variant; throws if it was not compiled in.
const KernelTable& table(Isa isa);

/// The table used by all numcore ops. Chosen once from the CPU features unless the
/// environment variable ALP_SIMD is set to `scalar`, `avx2` or `neon`.
const KernelTable& active();

/// Overrides the active variant (tests and benchmarks only).
void set_active(Isa isa);

namespace detail {
extern const KernelTable scalar_table;
#if defined(ALP_HAVE_AVX2_KERNELS)
extern const KernelTable avx2_table;
#endif
#if defined(ALP_HAVE_NEON_KERNELS)
extern const KernelTable neon_table;
#endif
} // namespace detail

} // namespace alp::num::kernels
