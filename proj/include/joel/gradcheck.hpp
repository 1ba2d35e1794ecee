#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace joel {

struct GradcheckCase {
  std::vector<std::size_t> trunk;
  std::size_t input_dim = 0;
  std::size_t concepts = 0;
  double lambda = 1.0;
  bool batch_norm = false;
  double dropout = 0.0;
  std::size_t parameters = 0;
  double max_relative_error = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckCase> cases;
  double worst = 0.0;
};

// Compares joint-loss backpropagation against central differences on
// `count` random small networks (at most 3 trunk layers, at most 2000
// parameters, lambda cycling through 0, 1, 2).
GradcheckReport run_gradcheck(std::uint64_t seed, std::size_t count = 20, double h = 1e-5);

}  // namespace joel
