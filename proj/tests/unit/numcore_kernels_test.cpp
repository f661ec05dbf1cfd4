#include "alp/numcore/kernels.hpp"
#include "alp/numcore/parallel.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <vector>

using namespace alp::num;
using alp::test::uniform_tensor;

namespace {

std::vector<kernels::Isa> available_isas()
{
    std::vector<kernels::Isa> out{kernels::Isa::scalar};
    for (auto isa : {kernels::Isa::avx2, kernels::Isa::neon}) {
        if (kernels::isa_available(isa)) {
            out.push_back(isa);
        }
    }
    return out;
}

} // namespace

TEST(Kernels, VariantsAgreeWithScalarReference)
{
    const auto& ref = kernels::table(kernels::Isa::scalar);
    for (auto isa : available_isas()) {
        const auto& kt = kernels::table(isa);
        for (std::size_t k : {1u, 3u, 4u, 7u, 8u, 13u, 32u, 37u}) {
            const std::size_t m = 5, n = 11;
            const auto a = uniform_tensor({m, k}, k);
            const auto b = uniform_tensor({k, n}, k + 1);
            const auto bt = uniform_tensor({n, k}, k + 2);
            const auto at = uniform_tensor({k, m}, k + 3);
            std::vector<double> c0(m * n), c1(m * n);
            ref.gemm_nn(m, n, k, a.ptr(), b.ptr(), c0.data(), false);
            kt.gemm_nn(m, n, k, a.ptr(), b.ptr(), c1.data(), false);
            for (std::size_t i = 0; i < c0.size(); ++i) {
                EXPECT_NEAR(c0[i], c1[i], 1e-12) << kernels::isa_name(isa);
            }
            ref.gemm_nt(m, n, k, a.ptr(), bt.ptr(), c0.data(), false);
            kt.gemm_nt(m, n, k, a.ptr(), bt.ptr(), c1.data(), false);
            for (std::size_t i = 0; i < c0.size(); ++i) {
                EXPECT_NEAR(c0[i], c1[i], 1e-12) << kernels::isa_name(isa);
            }
            ref.gemm_tn(m, n, k, at.ptr(), b.ptr(), c0.data(), false);
            kt.gemm_tn(m, n, k, at.ptr(), b.ptr(), c1.data(), false);
            for (std::size_t i = 0; i < c0.size(); ++i) {
                EXPECT_NEAR(c0[i], c1[i], 1e-12) << kernels::isa_name(isa);
            }
            EXPECT_NEAR(ref.dot(a.ptr(), at.ptr(), k), kt.dot(a.ptr(), at.ptr(), k), 1e-12);
        }
    }
}

TEST(Kernels, RowResultDoesNotDependOnMatrixHeight)
{
    for (auto isa : available_isas()) {
        const auto& kt = kernels::table(isa);
        const std::size_t k = 19, n = 9;
        const auto a = uniform_tensor({7, k}, 3);
        const auto b = uniform_tensor({k, n}, 4);
        const auto bt = uniform_tensor({n, k}, 5);
        std::vector<double> full(7 * n), one(n);
        kt.gemm_nn(7, n, k, a.ptr(), b.ptr(), full.data(), false);
        kt.gemm_nn(1, n, k, a.ptr() + 4 * k, b.ptr(), one.data(), false);
        EXPECT_TRUE(std::equal(one.begin(), one.end(), full.begin() + 4 * n));
        std::vector<double> wide(7 * n), narrow(7 * 3);
        kt.gemm_nt(7, n, k, a.ptr(), bt.ptr(), wide.data(), false);
        kt.gemm_nt(7, 3, k, a.ptr(), bt.ptr(), narrow.data(), false);
        for (std::size_t i = 0; i < 7; ++i) {
            for (std::size_t j = 0; j < 3; ++j) {
                EXPECT_EQ(wide[i * n + j], narrow[i * 3 + j]);
            }
        }
    }
}

TEST(Kernels, AccumulateAddsIntoOutput)
{
    const auto& kt = kernels::active();
    const auto a = uniform_tensor({2, 3}, 1);
    const auto b = uniform_tensor({3, 2}, 2);
    std::vector<double> c(4, 1.0), fresh(4);
    kt.gemm_nn(2, 2, 3, a.ptr(), b.ptr(), c.data(), true);
    kt.gemm_nn(2, 2, 3, a.ptr(), b.ptr(), fresh.data(), false);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_NEAR(c[i], fresh[i] + 1.0, 1e-14);
    }
}

TEST(Parallel, ResultsIndependentOfWorkerCount)
{
    auto run = [](std::size_t workers) {
        std::vector<double> slots(64);
        parallel_for(slots.size(), workers, [&](std::size_t i) {
            GaussianStream g(derive_seed(9, {i}));
            slots[i] = g() + g();
        });
        return slots;
    };
    EXPECT_EQ(run(1), run(4));
    EXPECT_THROW(parallel_for(3, 2, [](std::size_t i) {
                     if (i == 1) {
                         throw std::runtime_error("boom");
                     }
                 }),
                 std::runtime_error);
}
