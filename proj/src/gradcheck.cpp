#include "joel/gradcheck.hpp"

#include <algorithm>

#include "joel/model.hpp"
#include "joel/rng.hpp"

namespace joel {

namespace {

ConceptTaxonomy small_taxonomy(std::size_t planted) {
  std::vector<Concept> cs;
  for (std::size_t i = 0; i < planted; ++i) {
    cs.push_back({"c" + std::to_string(i), "C" + std::to_string(i),
                  i % 2 ? Polarity::legit : Polarity::fraud, ""});
  }
  cs.push_back({"other_fraud", "Other fraud", Polarity::other_fraud, ""});
  cs.push_back({"other_legit", "Other legit", Polarity::other_legit, ""});
  return ConceptTaxonomy(std::move(cs));
}

}  // namespace

GradcheckReport run_gradcheck(std::uint64_t seed, std::size_t count, double h) {
  static constexpr double kLambdas[] = {0.0, 1.0, 2.0};
  GradcheckReport report;
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t case_seed = mix_seed(seed, i);
    Architecture arch;
    GradcheckCase gc;
    ConceptTaxonomy tax;
    JoelNetwork net;
    // Draw shapes until the parameter budget is met.
    do {
      arch = Architecture{};
      arch.input_dim = 2 + rng.below(7);
      const std::size_t depth = 1 + rng.below(3);
      for (std::size_t l = 0; l < depth; ++l) arch.trunk_widths.push_back(2 + rng.below(15));
      arch.batch_norm = rng.bernoulli(0.5);
      arch.trunk_dropout = {rng.bernoulli(0.5) ? 0.2 : 0.0};
      tax = small_taxonomy(1 + rng.below(4));
      net = build(arch, tax, case_seed, kLambdas[i % 3]);
    } while (nn::parameter_count(net.layers) > 2000);

    // Non-trivial biases and batch-norm affine parameters.
    for (auto& layer : net.layers) {
      for (double& b : layer.b) b = rng.uniform(-0.5, 0.5);
      if (layer.bn) {
        for (double& g : layer.bn->gamma) g = rng.uniform(0.5, 1.5);
        for (double& b : layer.bn->beta) b = rng.uniform(-0.5, 0.5);
      }
    }
    const std::size_t batch = 3 + rng.below(6);
    Matrix x(batch, arch.input_dim);
    for (double& v : x.flat()) v = rng.normal();
    Matrix y(batch, kNumDecisions);
    Matrix s(batch, tax.size());
    for (std::size_t r = 0; r < batch; ++r) {
      y(r, rng.below(kNumDecisions)) = 1.0;
      for (std::size_t c = 0; c < tax.size(); ++c) s(r, c) = rng.bernoulli(0.4) ? 1.0 : 0.0;
    }
    const double lambda = net.lambda;
    const std::uint64_t dropout_seed = mix_seed(case_seed, 99);
    const auto trace = nn::forward(net.layers, x, nn::Mode::train, dropout_seed);
    const JointGradients analytic = joint_backward(net, trace, y, s, lambda);
    const auto loss = [&](const nn::Network& layers) {
      JoelNetwork probe = net;
      probe.layers = layers;
      const auto t = nn::forward(layers, x, nn::Mode::train, dropout_seed);
      return joint_loss(probe, t, y, s, lambda).total;
    };
    const nn::Gradients numeric = nn::finite_diff_grad(net.layers, loss, h);

    gc.trunk = arch.trunk_widths;
    gc.input_dim = arch.input_dim;
    gc.concepts = tax.size();
    gc.lambda = lambda;
    gc.batch_norm = arch.batch_norm;
    gc.dropout = arch.trunk_dropout.front();
    gc.parameters = nn::parameter_count(net.layers);
    gc.max_relative_error = nn::max_relative_error(analytic.grads, numeric);
    report.worst = std::max(report.worst, gc.max_relative_error);
    report.cases.push_back(std::move(gc));
  }
  return report;
}

}  // namespace joel
