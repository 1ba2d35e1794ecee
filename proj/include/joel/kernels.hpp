#pragma once

#include <cstddef>
#include <span>
#include <string_view>

namespace joel::kernels {

// Hyperparameters of one bias-corrected Adam update, shared by all variants.
struct AdamParams {
  double learning_rate;
  double beta1;
  double beta2;
  double epsilon;
  double bias_correction1;  // 1 - beta1^t
  double bias_correction2;  // 1 - beta2^t
};

// Table of the data-parallel inner loops used by the network engine.
// Every variant must agree with the scalar reference to within rounding
// (reassociated sums); elementwise kernels without reductions are bitwise
// identical across variants.
struct KernelTable {
  std::string_view name;

  // sum_i a[i] * b[i]
  double (*dot)(std::span<const double> a, std::span<const double> b);

  // y += alpha * x
  void (*axpy)(double alpha, std::span<const double> x, std::span<double> y);

  // y[i] = max(x[i], 0)
  void (*relu)(std::span<const double> x, std::span<double> y);

  // g[i] = x[i] > 0 ? g[i] : 0   (relu backward, in place on the gradient)
  void (*relu_mask)(std::span<const double> x, std::span<double> g);

  // In-place Adam moment update and parameter step.
  void (*adam)(std::span<double> param, std::span<const double> grad,
               std::span<double> m, std::span<double> v, const AdamParams& p);
};

enum class Isa { scalar, avx2 };

const KernelTable& scalar_table();

// nullptr when the variant was not compiled in or the CPU lacks support.
const KernelTable* avx2_table();

// The table used by the network engine. Chosen once on first use: the best
// supported variant, unless JOEL_KERNELS=scalar|avx2 overrides it.
const KernelTable& active();

// Returns false when the requested variant is unavailable.
bool select(Isa isa);

Isa active_isa();

}  // namespace joel::kernels
