// AVX2 variants. This translation unit is compiled with -mavx2 -mfma and is
// only entered after a runtime CPU check. FP contraction is disabled for this
// file so the elementwise kernels round exactly like the scalar ones; dot
// uses explicit FMA.
#include "kernels_impl.hpp"

#include <immintrin.h>

#include <algorithm>

namespace joel::kernels::detail {
namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = a.size();
  const double* pa = a.data();
  const double* pb = b.data();
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(pa + i), _mm256_loadu_pd(pb + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(pa + i + 4), _mm256_loadu_pd(pb + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(pa + i), _mm256_loadu_pd(pb + i), acc0);
  }
  acc0 = _mm256_add_pd(acc0, acc1);
  __m128d lo = _mm256_castpd256_pd128(acc0);
  __m128d hi = _mm256_extractf128_pd(acc0, 1);
  lo = _mm_add_pd(lo, hi);
  double sum = _mm_cvtsd_f64(_mm_add_sd(lo, _mm_unpackhi_pd(lo, lo)));
  for (; i < n; ++i) sum += pa[i] * pb[i];
  return sum;
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  const std::size_t n = x.size();
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  // mul + add rather than fma so results match the scalar loop bitwise
  for (; i + 4 <= n; i += 4) {
    const __m256d prod = _mm256_mul_pd(va, _mm256_loadu_pd(x.data() + i));
    _mm256_storeu_pd(y.data() + i, _mm256_add_pd(_mm256_loadu_pd(y.data() + i), prod));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void relu(std::span<const double> x, std::span<double> y) {
  const std::size_t n = x.size();
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y.data() + i, _mm256_max_pd(_mm256_loadu_pd(x.data() + i), zero));
  }
  for (; i < n; ++i) y[i] = std::max(x[i], 0.0);
}

void relu_mask(std::span<const double> x, std::span<double> g) {
  const std::size_t n = x.size();
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d keep = _mm256_cmp_pd(_mm256_loadu_pd(x.data() + i), zero, _CMP_GT_OQ);
    _mm256_storeu_pd(g.data() + i, _mm256_and_pd(_mm256_loadu_pd(g.data() + i), keep));
  }
  for (; i < n; ++i) {
    if (!(x[i] > 0.0)) g[i] = 0.0;
  }
}

void adam(std::span<double> param, std::span<const double> grad,
          std::span<double> m, std::span<double> v, const AdamParams& p) {
  const std::size_t n = param.size();
  const __m256d b1 = _mm256_set1_pd(p.beta1);
  const __m256d b2 = _mm256_set1_pd(p.beta2);
  const __m256d omb1 = _mm256_set1_pd(1.0 - p.beta1);
  const __m256d omb2 = _mm256_set1_pd(1.0 - p.beta2);
  const __m256d bc1 = _mm256_set1_pd(p.bias_correction1);
  const __m256d bc2 = _mm256_set1_pd(p.bias_correction2);
  const __m256d lr = _mm256_set1_pd(p.learning_rate);
  const __m256d eps = _mm256_set1_pd(p.epsilon);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d g = _mm256_loadu_pd(grad.data() + i);
    __m256d mi = _mm256_add_pd(_mm256_mul_pd(b1, _mm256_loadu_pd(m.data() + i)),
                               _mm256_mul_pd(omb1, g));
    __m256d vi = _mm256_add_pd(_mm256_mul_pd(b2, _mm256_loadu_pd(v.data() + i)),
                               _mm256_mul_pd(omb2, _mm256_mul_pd(g, g)));
    _mm256_storeu_pd(m.data() + i, mi);
    _mm256_storeu_pd(v.data() + i, vi);
    const __m256d m_hat = _mm256_div_pd(mi, bc1);
    const __m256d v_hat = _mm256_div_pd(vi, bc2);
    const __m256d step =
        _mm256_mul_pd(lr, _mm256_div_pd(m_hat, _mm256_add_pd(_mm256_sqrt_pd(v_hat), eps)));
    _mm256_storeu_pd(param.data() + i, _mm256_sub_pd(_mm256_loadu_pd(param.data() + i), step));
  }
  if (i < n) {
    kScalarTable.adam(param.subspan(i), grad.subspan(i), m.subspan(i), v.subspan(i), p);
  }
}

}  // namespace

const KernelTable kAvx2Table{"avx2", &dot, &axpy, &relu, &relu_mask, &adam};

}  // namespace joel::kernels::detail
