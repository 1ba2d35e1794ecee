#include "kernels_impl.hpp"

#include <atomic>
#include <cstdlib>
#include <string_view>

namespace joel::kernels {
namespace {

#if defined(JOEL_HAVE_AVX2)
bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}
#endif

const KernelTable* initial_table() {
  const KernelTable* best = avx2_table();
  if (best == nullptr) best = &scalar_table();
  if (const char* env = std::getenv("JOEL_KERNELS")) {
    const std::string_view want{env};
    if (want == "scalar") return &scalar_table();
    if (want == "avx2" && avx2_table() != nullptr) return avx2_table();
  }
  return best;
}

std::atomic<const KernelTable*>& slot() {
  static std::atomic<const KernelTable*> table{initial_table()};
  return table;
}

}  // namespace

const KernelTable& scalar_table() { return detail::kScalarTable; }

const KernelTable* avx2_table() {
#if defined(JOEL_HAVE_AVX2)
  static const bool supported = cpu_has_avx2();
  return supported ? &detail::kAvx2Table : nullptr;
#else
  return nullptr;
#endif
}

const KernelTable& active() { return *slot().load(std::memory_order_acquire); }

bool select(Isa isa) {
  const KernelTable* table = isa == Isa::scalar ? &scalar_table() : avx2_table();
  if (table == nullptr) return false;
  slot().store(table, std::memory_order_release);
  return true;
}

Isa active_isa() { return &active() == &scalar_table() ? Isa::scalar : Isa::avx2; }

}  // namespace joel::kernels
