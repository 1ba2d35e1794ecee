#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "joel/error.hpp"
#include "joel/nn.hpp"
#include "joel/rng.hpp"

using namespace joel;
using namespace joel::nn;

namespace {

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c) {
  Matrix m(r, c);
  for (auto& v : m.flat()) v = rng.normal();
  return m;
}

// Independent dense oracle: y = act(W x + b) row by row, no kernels.
Matrix dense_oracle(const DenseLayer& l, const Matrix& x) {
  Matrix y(x.rows(), l.out_dim());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mx = -INFINITY;
    for (std::size_t o = 0; o < l.out_dim(); ++o) {
      long double acc = l.b[o];
      for (std::size_t i = 0; i < l.in_dim(); ++i) acc += static_cast<long double>(l.W(o, i)) * x(r, i);
      y(r, o) = static_cast<double>(acc);
      mx = std::max(mx, y(r, o));
    }
    double z = 0.0;
    for (std::size_t o = 0; o < l.out_dim(); ++o) {
      double& v = y(r, o);
      switch (l.activation) {
        case Activation::identity: break;
        case Activation::relu: v = v > 0 ? v : 0.0; break;
        case Activation::sigmoid: v = 1.0 / (1.0 + std::exp(-v)); break;
        case Activation::softmax: v = std::exp(v - mx); z += v; break;
      }
    }
    if (l.activation == Activation::softmax) {
      for (std::size_t o = 0; o < l.out_dim(); ++o) y(r, o) /= z;
    }
  }
  return y;
}

double params_hash(const Network& net) {
  double h = 0.0;
  double k = 1.0;
  for (const auto& l : net) {
    for (const auto& blk : parameter_blocks(l)) {
      for (double v : blk) h += (k += 1.0) * v;
    }
  }
  return h;
}

Network small_net(std::uint64_t seed, bool bn = false) {
  const std::vector<LayerSpec> specs{{6, Activation::relu, 0.0, bn},
                                     {4, Activation::sigmoid, 0.0, false},
                                     {2, Activation::softmax, 0.0, false}};
  return init_network(specs, 5, seed);
}

}  // namespace

TEST_CASE("initialization is seeded Glorot-uniform with zero bias") {
  const std::vector<LayerSpec> specs{{64, Activation::relu, 0.0, false}};
  const Network a = init_network(specs, 128, 4);
  const Network b = init_network(specs, 128, 4);
  CHECK(a == b);
  const double bound = std::sqrt(6.0 / (128 + 64));
  double mx = 0.0;
  for (double w : a[0].W.flat()) mx = std::max(mx, std::fabs(w));
  CHECK(mx <= bound);
  CHECK(mx > 0.9 * bound);
  for (double v : a[0].b) CHECK(v == 0.0);
  CHECK(init_network(specs, 128, 5) != a);
}

TEST_CASE("softmax is allowed only on the last layer") {
  const std::vector<LayerSpec> specs{{3, Activation::softmax, 0.0, false},
                                     {2, Activation::relu, 0.0, false}};
  CHECK_THROWS_AS(init_network(specs, 4, 0), ValidationError);
}

TEST_CASE("identity network returns its input") {
  Network net(1);
  net[0].W = Matrix(3, 3);
  for (int i = 0; i < 3; ++i) net[0].W(i, i) = 1.0;
  net[0].b.assign(3, 0.0);
  net[0].activation = Activation::identity;
  Rng rng(1);
  const Matrix x = random_matrix(rng, 4, 3);
  CHECK(infer(net, x) == x);
}

TEST_CASE("forward matches a dense oracle and train equals eval without dropout") {
  Rng rng(2);
  Network net = small_net(7);
  for (auto& l : net) {
    for (auto& v : l.b) v = rng.normal() * 0.1;
  }
  const Matrix x = random_matrix(rng, 9, 5);
  Matrix h = x;
  for (const auto& l : net) h = dense_oracle(l, h);
  const Matrix got = infer(net, x);
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::fabs(got.flat()[i] - h.flat()[i]) <= 1e-12);
  CHECK(forward(net, x, Mode::train, 3).output() == got);
}

TEST_CASE("activation values") {
  Matrix z(1, 3, 0.0);
  const Matrix s = softmax(z);
  for (double v : s.flat()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));
  CHECK(sigmoid(0.0) == 0.5);
  Matrix two(1, 2);
  two(0, 0) = 1;
  two(0, 1) = 2;
  const Matrix p = softmax(two);
  const double e = std::exp(1.0);
  CHECK(p(0, 0) == doctest::Approx(1.0 / (1.0 + e)).epsilon(1e-14));
  CHECK(p(0, 1) == doctest::Approx(e / (1.0 + e)).epsilon(1e-14));
  CHECK(p(0, 0) == doctest::Approx(0.26894).epsilon(1e-4));
  Matrix big(1, 2);
  big(0, 0) = 1000;
  big(0, 1) = 0;
  const Matrix q = softmax(big);
  CHECK(q(0, 0) == 1.0);
  CHECK(std::isfinite(q(0, 1)));
}

TEST_CASE("cross entropy") {
  Matrix y(1, 2);
  y(0, 1) = 1;
  CHECK(cross_entropy(y, y) == 0.0);
  Matrix half(1, 2, 0.5);
  CHECK(cross_entropy(half, y) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  Matrix p2(2, 2), y2(2, 2);
  p2(0, 0) = p2(1, 0) = 0.3;
  p2(0, 1) = p2(1, 1) = 0.7;
  y2(0, 1) = y2(1, 1) = 1;
  Matrix p1(1, 2);
  p1(0, 0) = 0.3;
  p1(0, 1) = 0.7;
  CHECK(cross_entropy(p2, y2) == cross_entropy(p1, y));
  Matrix zero(1, 2);
  zero(0, 0) = 1.0;
  CHECK(cross_entropy(zero, y) == doctest::Approx(-std::log(1e-12)));
}

TEST_CASE("binary cross entropy") {
  Matrix s(1, 2);
  s(0, 0) = 1;
  CHECK(binary_cross_entropy(s, s) == doctest::Approx(0.0).epsilon(1e-11));
  Matrix half(1, 2, 0.5);
  CHECK(binary_cross_entropy(half, s) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  Matrix ones(1, 2, 1.0);
  CHECK(binary_cross_entropy(ones, s) > 0.0);
  CHECK(std::isfinite(binary_cross_entropy(ones, s)));
}

TEST_CASE("loss gradients match finite differences of the losses") {
  Rng rng(9);
  Matrix p(3, 4), s(3, 4);
  for (auto& v : p.flat()) v = rng.uniform(0.05, 0.95);
  for (auto& v : s.flat()) v = rng.bernoulli(0.5);
  const Matrix g = binary_cross_entropy_grad(p, s);
  for (std::size_t i = 0; i < p.size(); ++i) {
    Matrix a = p, b = p;
    a.flat()[i] += 1e-6;
    b.flat()[i] -= 1e-6;
    const double fd = (binary_cross_entropy(a, s) - binary_cross_entropy(b, s)) / 2e-6;
    CHECK(g.flat()[i] == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("backward: zero output gradient and frozen layers") {
  Rng rng(3);
  Network net = small_net(1, true);
  const Matrix x = random_matrix(rng, 6, 5);
  const auto trace = forward(net, x, Mode::train, 1);
  const Gradients zero = backward(net, trace, Matrix(6, 2));
  CHECK(zero.max_abs() == 0.0);

  const std::size_t frozen[] = {1};
  set_frozen(net, frozen, true);
  Matrix gout = random_matrix(rng, 6, 2);
  const auto t2 = forward(net, x, Mode::train, 1);
  const Gradients g = backward(net, t2, gout);
  for (const auto& blk : g.layers[1].blocks()) {
    for (double v : blk) CHECK(v == 0.0);
  }
  double first = 0.0;
  for (double v : g.layers[0].dW.flat()) first = std::max(first, std::fabs(v));
  CHECK(first > 0.0);
  CHECK_THROWS_AS(backward(net, forward(net, x, Mode::eval), gout), UsageError);
}

TEST_CASE("backward matches finite differences with batch norm and dropout") {
  Rng rng(4);
  std::vector<LayerSpec> specs{{7, Activation::relu, 0.3, true},
                               {5, Activation::relu, 0.0, true},
                               {3, Activation::softmax, 0.0, false}};
  Network net = init_network(specs, 4, 17);
  for (auto& l : net) {
    for (auto& v : l.b) v = rng.normal() * 0.3;
    if (l.bn) {
      for (auto& v : l.bn->gamma) v = rng.uniform(0.5, 1.5);
      for (auto& v : l.bn->beta) v = rng.normal() * 0.2;
    }
  }
  const Matrix x = random_matrix(rng, 8, 4);
  Matrix y(8, 3);
  for (std::size_t r = 0; r < 8; ++r) y(r, rng.below(3)) = 1.0;
  auto loss = [&](const Network& n) {
    return cross_entropy(forward(n, x, Mode::train, 55).output(), y);
  };
  const auto trace = forward(net, x, Mode::train, 55);
  const Gradients g = backward(net, trace, cross_entropy_grad(trace.output(), y));
  const Gradients fd = finite_diff_grad(net, loss, 1e-5);
  CHECK(max_relative_error(g, fd) <= 1e-4);
}

TEST_CASE("finite differences: closed form, second order, constant loss") {
  Network net(1);
  net[0].W = Matrix(1, 1, 0.7);
  net[0].b = {0.0};
  net[0].activation = Activation::identity;
  const double x = 1.3, t = 0.4;
  auto sq = [&](const Network& n) {
    const double e = n[0].W(0, 0) * x + n[0].b[0] - t;
    return e * e;
  };
  const Gradients fd = finite_diff_grad(net, sq, 1e-5);
  const double analytic = 2.0 * (0.7 * x - t) * x;
  CHECK(std::fabs(fd.layers[0].dW(0, 0) - analytic) <= 1e-8);

  auto cubic = [&](const Network& n) { return std::pow(n[0].W(0, 0), 3) + std::exp(n[0].W(0, 0)); };
  const double exact = 3 * 0.49 + std::exp(0.7);
  const double e1 = std::fabs(finite_diff_grad(net, cubic, 1e-2).layers[0].dW(0, 0) - exact);
  const double e2 = std::fabs(finite_diff_grad(net, cubic, 5e-3).layers[0].dW(0, 0) - exact);
  CHECK(e1 / e2 == doctest::Approx(4.0).epsilon(0.05));

  const Gradients c = finite_diff_grad(net, [](const Network&) { return 3.0; }, 1e-5);
  CHECK(c.max_abs() == 0.0);
}

TEST_CASE("optimizer arithmetic") {
  Network net(1);
  net[0].W = Matrix(1, 1, 1.0);
  net[0].b = {0.0};
  net[0].activation = Activation::identity;
  Gradients g = zero_gradients(net);
  g.layers[0].dW(0, 0) = 0.5;

  SUBCASE("sgd") {
    auto st = OptimizerState::sgd(0.1);
    sgd_step(net, g, st);
    CHECK(net[0].W(0, 0) == doctest::Approx(0.95).epsilon(1e-15));
  }
  SUBCASE("adam first step") {
    auto st = OptimizerState::adam(0.001);
    adam_step(net, g, st);
    const double expected = 1.0 - 0.001 * 0.5 / (0.5 + 1e-8);
    CHECK(net[0].W(0, 0) == doctest::Approx(expected).epsilon(1e-14));
    CHECK(std::fabs(1.0 - net[0].W(0, 0) - 0.001) < 1e-10);
  }
  SUBCASE("zero gradient leaves parameters") {
    const Network before = net;
    const Gradients z = zero_gradients(net);
    auto s1 = OptimizerState::sgd(0.1);
    auto s2 = OptimizerState::adam(0.1);
    sgd_step(net, z, s1);
    adam_step(net, z, s2);
    CHECK(net == before);
  }
  SUBCASE("lr scale multiplies the sgd delta") {
    Network other = net;
    auto s1 = OptimizerState::sgd(0.1);
    auto s2 = OptimizerState::sgd(0.1);
    sgd_step(net, g, s1, 1.0);
    sgd_step(other, g, s2, 0.5);
    CHECK((1.0 - other[0].W(0, 0)) * 2.0 == doctest::Approx(1.0 - net[0].W(0, 0)).epsilon(1e-15));
  }
}

TEST_CASE("freezing") {
  Rng rng(6);
  Network net = small_net(2);
  const Matrix x = random_matrix(rng, 10, 5);
  Matrix y(10, 2);
  for (std::size_t r = 0; r < 10; ++r) y(r, r % 2) = 1.0;
  auto train_steps = [&](int n) {
    auto st = OptimizerState::adam(0.01);
    for (int i = 0; i < n; ++i) {
      const auto tr = forward(net, x, Mode::train, static_cast<std::uint64_t>(i));
      step(net, backward(net, tr, cross_entropy_grad(tr.output(), y)), st);
    }
  };

  const std::size_t all[] = {0, 1, 2};
  set_frozen(net, all, true);
  const Network before = net;
  train_steps(5);
  CHECK(net == before);

  const std::size_t trunk[] = {0};
  set_frozen(net, all, false);
  set_frozen(net, trunk, true);
  const double trunk_hash = params_hash(Network{net[0]});
  const double head_hash = params_hash(Network{net[2]});
  train_steps(100);
  CHECK(params_hash(Network{net[0]}) == trunk_hash);
  CHECK(params_hash(Network{net[2]}) != head_hash);

  set_frozen(net, trunk, false);
  train_steps(1);
  CHECK(params_hash(Network{net[0]}) != trunk_hash);

  const std::size_t bad[] = {7};
  CHECK_THROWS_AS(set_frozen(net, bad, true), ValidationError);
}

TEST_CASE("non-finite input is rejected") {
  Network net = small_net(1);
  Matrix x(1, 5);
  x(0, 2) = NAN;
  CHECK_THROWS_AS(forward(net, x, Mode::eval), ValidationError);
  CHECK_THROWS_AS(forward(net, Matrix(1, 4), Mode::eval), ValidationError);
}

TEST_CASE("batch norm running statistics use momentum 0.9") {
  Network net = small_net(1, true);
  Rng rng(7);
  const Matrix x = random_matrix(rng, 16, 5);
  const auto tr = forward(net, x, Mode::train, 0);
  const auto& cache = tr.caches[0];
  const std::vector<double> rm0 = net[0].bn->running_mean;
  update_running_stats(net, tr);
  for (std::size_t i = 0; i < rm0.size(); ++i) {
    CHECK(net[0].bn->running_mean[i] ==
          doctest::Approx(0.9 * rm0[i] + 0.1 * cache.batch_mean[i]).epsilon(1e-15));
  }
}
