#include "alp/numcore/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace alp::num::kernels {
namespace {

Isa detect()
{
    if (const char* forced = std::getenv("ALP_SIMD")) {
        const std::string name(forced);
        if (name == "scalar") {
            return Isa::scalar;
        }
        if (name == "avx2" && isa_available(Isa::avx2)) {
            return Isa::avx2;
        }
        if (name == "neon" && isa_available(Isa::neon)) {
            return Isa::neon;
        }
    }
    if (isa_available(Isa::avx2)) {
        return Isa::avx2;
    }
    if (isa_available(Isa::neon)) {
        return Isa::neon;
    }
    return Isa::scalar;
}

std::atomic<const KernelTable*>& slot()
{
    static std::atomic<const KernelTable*> current{&table(detect())};
    return current;
}

} // namespace

std::string_view isa_name(Isa isa)
{
    switch (isa) {
    case Isa::scalar:
        return "scalar";
    case Isa::avx2:
        return "avx2";
    case Isa::neon:
        return "neon";
    }
    return "unknown";
}

bool isa_available(Isa isa)
{
    switch (isa) {
    case Isa::scalar:
        return true;
    case Isa::avx2:
#if defined(ALP_HAVE_AVX2_KERNELS)
        return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
        return false;
#endif
    case Isa::neon:
#if defined(ALP_HAVE_NEON_KERNELS)
        return true;
#else
        return false;
#endif
    }
    return false;
}

const KernelTable& table(Isa isa)
{
    switch (isa) {
    case Isa::scalar:
        return detail::scalar_table;
    case Isa::avx2:
#if defined(ALP_HAVE_AVX2_KERNELS)
        return detail::avx2_table;
#else
        break;
#endif
    case Isa::neon:
#if defined(ALP_HAVE_NEON_KERNELS)
        return detail::neon_table;
#else
        break;
#endif
    }
    throw std::runtime_error("kernel variant '" + std::string(isa_name(isa)) + "' is not compiled in");
}

const KernelTable& active()
{
    return *slot().load(std::memory_order_acquire);
}

void set_active(Isa isa)
{
    if (!isa_available(isa)) {
        throw std::runtime_error("kernel variant '" + std::string(isa_name(isa)) + "' is unavailable on this CPU");
    }
    slot().store(&table(isa), std::memory_order_release);
}

} // namespace alp::num::kernels
