#include "kernels_impl.hpp"

#include <algorithm>
#include <cmath>

namespace joel::kernels::detail {
namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += a[i] * b[i];
  return sum;
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

void relu(std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::max(x[i], 0.0);
}

void relu_mask(std::span<const double> x, std::span<double> g) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0)) g[i] = 0.0;
  }
}

void adam(std::span<double> param, std::span<const double> grad,
          std::span<double> m, std::span<double> v, const AdamParams& p) {
  const double one_minus_b1 = 1.0 - p.beta1;
  const double one_minus_b2 = 1.0 - p.beta2;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    m[i] = p.beta1 * m[i] + one_minus_b1 * g;
    v[i] = p.beta2 * v[i] + one_minus_b2 * (g * g);
    const double m_hat = m[i] / p.bias_correction1;
    const double v_hat = v[i] / p.bias_correction2;
    param[i] -= p.learning_rate * (m_hat / (std::sqrt(v_hat) + p.epsilon));
  }
}

}  // namespace

const KernelTable kScalarTable{"scalar", &dot, &axpy, &relu, &relu_mask, &adam};

}  // namespace joel::kernels::detail
