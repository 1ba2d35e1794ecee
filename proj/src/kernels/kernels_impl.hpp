#pragma once

#include "joel/kernels.hpp"

namespace joel::kernels::detail {

extern const KernelTable kScalarTable;

#if defined(JOEL_HAVE_AVX2)
extern const KernelTable kAvx2Table;
#endif

}  // namespace joel::kernels::detail
