#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

#include <nlohmann/json.hpp>

#include "joel/error.hpp"
#include "joel/io_util.hpp"
#include "joel/model.hpp"
#include "support.hpp"

using namespace joel;
using nlohmann::json;

namespace {

Architecture arch_of(std::size_t in, std::vector<std::size_t> trunk, bool bn = false) {
  Architecture a;
  a.input_dim = in;
  a.trunk_widths = std::move(trunk);
  a.batch_norm = bn;
  return a;
}

void randomize_biases(JoelNetwork& net, Rng& rng) {
  for (auto& l : net.layers) {
    for (auto& v : l.b) v = rng.normal() * 0.5;
  }
}

Matrix random_x(Rng& rng, std::size_t n, std::size_t d) {
  Matrix x(n, d);
  for (auto& v : x.flat()) v = rng.normal();
  return x;
}

struct Targets {
  Matrix y, s;
};

Targets random_targets(Rng& rng, std::size_t n, std::size_t k) {
  Targets t{Matrix(n, 2), Matrix(n, k)};
  for (std::size_t r = 0; r < n; ++r) {
    t.y(r, rng.below(2)) = 1.0;
    for (std::size_t c = 0; c < k; ++c) t.s(r, c) = rng.bernoulli(0.4);
  }
  return t;
}

EncodedSet random_set(Rng& rng, std::size_t n, std::size_t d, std::size_t k) {
  EncodedSet set;
  set.x = random_x(rng, n, d);
  set.concepts = Matrix(n, k);
  for (std::size_t r = 0; r < n; ++r) {
    set.labels.push_back(rng.bernoulli(0.3) ? 1 : 0);
    set.event_ids.push_back("e" + std::to_string(r));
    for (std::size_t c = 0; c < k; ++c) set.concepts(r, c) = rng.bernoulli(0.4);
  }
  set.labels[0] = 1;
  set.labels[1] = 0;
  return set;
}

// FPR of "score >= t" by direct count.
double fpr_at(std::span<const double> s, std::span<const int> y, double t) {
  std::size_t fp = 0, neg = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] == 0) {
      ++neg;
      fp += s[i] >= t;
    }
  }
  return static_cast<double>(fp) / static_cast<double>(neg);
}

// The calibrated threshold must respect the target and no lower distinct
// score may.
void check_threshold(std::span<const double> s, std::span<const int> y, double target, double t) {
  CHECK(fpr_at(s, y, t) <= target + 1e-12);
  std::set<double> distinct(s.begin(), s.end());
  for (double v : distinct) {
    if (v < t) CHECK(fpr_at(s, y, v) > target + 1e-12);
  }
}

bool bitwise(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("build the deepest paper-style network") {
  const JoelNetwork net = build(arch_of(40, {128, 128, 64, 64, 32}), fraud_taxonomy(), 1);
  CHECK(net.layers.size() == 7);
  CHECK(net.layers[net.semantic_index()].out_dim() == 14);
  CHECK(net.layers[net.semantic_index()].activation == nn::Activation::sigmoid);
  CHECK(net.layers[net.decision_index()].in_dim() == 14);
  CHECK(net.layers[net.decision_index()].out_dim() == 2);
  CHECK(net.arch.in_paper_grid());
  CHECK(net.concept_thresholds == std::vector<double>(14, 0.5));
}

TEST_CASE("smallest taxonomy (the two fallbacks) still builds") {
  const ConceptTaxonomy tax({{"other_fraud", "", Polarity::other_fraud, ""},
                             {"other_legit", "", Polarity::other_legit, ""}});
  const JoelNetwork net = build(arch_of(3, {4}), tax, 1);
  net.validate();
  const auto p = predict(net, std::vector<double>{0.1, 0.2, 0.3});
  CHECK(p.concept_scores.size() == 2);
}

TEST_CASE("build rejects degenerate inputs and validate catches tampering") {
  CHECK_THROWS_AS(build(arch_of(0, {4}), testing::small_taxonomy(2), 1), ValidationError);
  JoelNetwork net = build(arch_of(5, {8, 4}), testing::small_taxonomy(3), 1);
  net.validate();
  JoelNetwork bad = net;
  bad.layers[bad.decision_index()].W = Matrix(2, 4);
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = net;
  bad.concept_thresholds.pop_back();
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = net;
  bad.layers[bad.semantic_index()].activation = nn::Activation::relu;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("predict: thresholds at the bounds and composition oracle") {
  Rng rng(3);
  JoelNetwork net = build(arch_of(6, {10, 7}, true), testing::small_taxonomy(4), 2);
  randomize_biases(net, rng);
  const std::vector<double> x{0.3, -1.2, 0.8, 2.0, -0.1, 0.0};

  net.concept_thresholds.assign(net.concept_count(), 1.0);
  CHECK(predict(net, x).concepts_fired.empty());
  net.concept_thresholds.assign(net.concept_count(), 0.0);
  CHECK(predict(net, x).concepts_fired.size() == net.concept_count());

  Matrix xm(1, 6);
  std::copy(x.begin(), x.end(), xm.row(0).begin());
  const auto trace = nn::forward(net.layers, xm, nn::Mode::eval);
  const Matrix& sem = trace.deltas[net.semantic_index() + 1];
  const Matrix& out = trace.output();
  const auto p = predict(net, x);
  for (std::size_t c = 0; c < net.concept_count(); ++c) {
    CHECK(p.concept_scores[c] == std::clamp(sem(0, c), 1e-12, 1 - 1e-12));
  }
  CHECK(p.fraud_score == out(0, kFraudClass));
  CHECK(p.model_version == net.version);
}

TEST_CASE("joint loss") {
  Rng rng(4);
  SUBCASE("perfect predictions") {
    Matrix y(2, 2), s(2, 3);
    y(0, 1) = y(1, 0) = 1;
    s(0, 0) = s(1, 2) = 1;
    const JointLoss l = joint_loss(y, s, y, s, 1.0);
    CHECK(l.total == doctest::Approx(0.0).epsilon(1e-10));
  }
  SUBCASE("lambda zero and the weighted sum") {
    Matrix p(5, 2), q(5, 3);
    for (std::size_t r = 0; r < 5; ++r) {
      p(r, 0) = rng.uniform(0.05, 0.95);
      p(r, 1) = 1 - p(r, 0);
      for (std::size_t c = 0; c < 3; ++c) q(r, c) = rng.uniform(0.05, 0.95);
    }
    const Targets t = random_targets(rng, 5, 3);
    // independently computed terms
    double ld = 0, ls = 0;
    for (std::size_t r = 0; r < 5; ++r) {
      for (std::size_t c = 0; c < 2; ++c) ld -= t.y(r, c) * std::log(p(r, c));
      for (std::size_t c = 0; c < 3; ++c) {
        ls -= (t.s(r, c) * std::log(q(r, c)) + (1 - t.s(r, c)) * std::log(1 - q(r, c))) / 3.0;
      }
    }
    ld /= 5;
    ls /= 5;
    const JointLoss zero = joint_loss(p, q, t.y, t.s, 0.0);
    CHECK(zero.total == zero.decision);
    const JointLoss two = joint_loss(p, q, t.y, t.s, 2.0);
    CHECK(std::fabs(two.decision - ld) <= 1e-12);
    CHECK(std::fabs(two.semantic - ls) <= 1e-12);
    CHECK(std::fabs(two.total - (ld + 2.0 * ls)) <= 1e-12);
  }
}

TEST_CASE("joint backward with lambda zero is plain classifier backprop") {
  Rng rng(5);
  JoelNetwork net = build(arch_of(4, {6}), testing::small_taxonomy(2), 3);
  randomize_biases(net, rng);
  const Matrix x = random_x(rng, 7, 4);
  const Targets t = random_targets(rng, 7, net.concept_count());
  const auto trace = nn::forward(net.layers, x, nn::Mode::train, 1);
  const JointGradients jg = joint_backward(net, trace, t.y, t.s, 0.0);
  const nn::Gradients plain =
      nn::backward(net.layers, trace, nn::cross_entropy_grad(trace.output(), t.y));
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    CHECK(jg.grads.layers[l].dW == plain.layers[l].dW);
    CHECK(jg.grads.layers[l].db == plain.layers[l].db);
  }
}

TEST_CASE("semantic-layer gradient is the sum of the branch gradients") {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    JoelNetwork net = build(arch_of(5, {7, 6}, trial % 2 == 0), testing::small_taxonomy(3), trial);
    randomize_biases(net, rng);
    const Matrix x = random_x(rng, 4, 5);
    const Targets t = random_targets(rng, 4, net.concept_count());
    const double lambda = rng.uniform(0.1, 3.0);
    const auto trace = nn::forward(net.layers, x, nn::Mode::train, 9);
    const Matrix dec = joint_backward(net, trace, t.y, t.s, 0.0).d_semantic;
    const Matrix both = joint_backward(net, trace, t.y, t.s, lambda).d_semantic;
    const Matrix sem_probs = trace.activated(net.semantic_index());
    const Matrix sem = nn::binary_cross_entropy_grad(sem_probs, t.s);
    for (std::size_t i = 0; i < both.size(); ++i) {
      CHECK(std::fabs(both.flat()[i] - (dec.flat()[i] + lambda * sem.flat()[i])) <= 1e-10);
    }
  }
}

TEST_CASE("finite-difference check on a tiny joint network") {
  Rng rng(7);
  JoelNetwork net = build(arch_of(4, {8}), testing::small_taxonomy(1), 5);
  REQUIRE(net.concept_count() == 3);
  randomize_biases(net, rng);
  const Matrix x = random_x(rng, 6, 4);
  const Targets t = random_targets(rng, 6, 3);
  const auto trace = nn::forward(net.layers, x, nn::Mode::train, 2);
  const JointGradients g = joint_backward(net, trace, t.y, t.s, 1.0);
  auto loss = [&](const nn::Network& layers) {
    JoelNetwork copy = net;
    copy.layers = layers;
    return joint_loss(copy, nn::forward(layers, x, nn::Mode::train, 2), t.y, t.s, 1.0).total;
  };
  const nn::Gradients fd = nn::finite_diff_grad(net.layers, loss, 1e-5);
  CHECK(nn::max_relative_error(g.grads, fd) <= 1e-4);
}

TEST_CASE("joint backward refuses an eval trace") {
  JoelNetwork net = build(arch_of(2, {3}), testing::small_taxonomy(1), 1);
  Rng rng(1);
  const Targets t = random_targets(rng, 2, 3);
  const auto trace = nn::forward(net.layers, Matrix(2, 2), nn::Mode::eval);
  CHECK_THROWS_AS(joint_backward(net, trace, t.y, t.s, 1.0), UsageError);
}

TEST_CASE("calibration meets the targets exactly as enumeration predicts") {
  Rng rng(8);
  JoelNetwork net = build(arch_of(5, {9, 6}), testing::small_taxonomy(4), 4);
  randomize_biases(net, rng);
  EncodedSet ref = random_set(rng, 400, 5, net.concept_count());
  // one concept without positives keeps the default
  for (std::size_t r = 0; r < ref.size(); ++r) ref.concepts(r, 1) = 0.0;
  const Calibration cal = calibrate_thresholds(net, ref, 0.03, 0.20);
  const Scores s = score(net, ref.x);
  check_threshold(s.fraud, ref.labels, 0.03, net.decision_threshold);
  for (std::size_t c = 0; c < net.concept_count(); ++c) {
    if (c == 1) {
      CHECK(cal.concept_defaulted[c]);
      CHECK(net.concept_thresholds[c] == 0.5);
      continue;
    }
    std::vector<double> col(ref.size());
    std::vector<int> lab(ref.size());
    for (std::size_t r = 0; r < ref.size(); ++r) {
      col[r] = s.concepts(r, c);
      lab[r] = ref.concepts(r, c) > 0.5;
    }
    check_threshold(col, lab, 0.20, net.concept_thresholds[c]);
  }
}

TEST_CASE("constant scores push thresholds above the constant") {
  JoelNetwork net = build(arch_of(3, {4}), testing::small_taxonomy(2), 1);
  for (auto& l : net.layers) {
    l.W.fill(0.0);
    std::fill(l.b.begin(), l.b.end(), 0.0);
  }
  Rng rng(2);
  const EncodedSet ref = random_set(rng, 50, 3, net.concept_count());
  const Calibration cal = calibrate_thresholds(net, ref);
  CHECK(cal.decision_above_max);
  CHECK(net.decision_threshold > 0.5);
  const auto p = predict(net, std::vector<double>{1, 2, 3});
  CHECK(p.fraud_score < net.decision_threshold);
  CHECK(p.concepts_fired.empty());
}

TEST_CASE("calibration input errors") {
  JoelNetwork net = build(arch_of(3, {4}), testing::small_taxonomy(2), 1);
  EncodedSet empty;
  empty.x = Matrix(0, 3);
  empty.concepts = Matrix(0, net.concept_count());
  CHECK_THROWS_AS(calibrate_thresholds(net, empty), ValidationError);
  Rng rng(3);
  EncodedSet one_class = random_set(rng, 10, 3, net.concept_count());
  std::fill(one_class.labels.begin(), one_class.labels.end(), 0);
  CHECK_THROWS_AS(calibrate_thresholds(net, one_class), ValidationError);
}

TEST_CASE("checkpoint round trip is bitwise") {
  testing::TempDir dir;
  Rng rng(9);
  JoelNetwork net = build(arch_of(6, {12, 8}, true), testing::small_taxonomy(5), 11);
  net.arch.trunk_dropout = {0.2};
  randomize_biases(net, rng);
  for (auto& l : net.layers) {
    if (l.bn) {
      for (auto& v : l.bn->running_mean) v = rng.normal();
      for (auto& v : l.bn->running_var) v = rng.uniform(0.5, 2.0);
    }
  }
  net.version = 42;
  net.lambda = 1.7;
  net.concept_thresholds[2] = 0.123456789012345678;
  net.decision_threshold = std::nextafter(0.3, 1.0);
  const Matrix x = random_x(rng, 50, 6);

  save_checkpoint(Checkpoint{net, std::nullopt, {{"note", "x"}}}, dir / "m.json");
  const Checkpoint back = load_checkpoint(dir / "m.json", &net.taxonomy);
  CHECK(back.net.layers == net.layers);
  CHECK(back.net.arch == net.arch);
  CHECK(back.net.version == 42);
  CHECK(back.net.decision_threshold == net.decision_threshold);
  CHECK(back.net.concept_thresholds == net.concept_thresholds);
  CHECK(model_hash(back.net) == model_hash(net));
  CHECK(back.metadata["note"] == "x");
  const Scores a = score(net, x);
  const Scores b = score(back.net, x);
  CHECK(bitwise(a.fraud, b.fraud));
  CHECK(a.concepts == b.concepts);
}

TEST_CASE("checkpoint load errors") {
  testing::TempDir dir;
  const JoelNetwork net = build(arch_of(3, {4}), testing::small_taxonomy(2), 1);
  save_checkpoint(Checkpoint{net, std::nullopt, json::object()}, dir / "m.json");

  json j = json::parse(read_file(dir / "m.json"));
  j["format"] = "something-else";
  write_file_atomic(dir / "bad.json", j.dump());
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.json"), FormatError);

  j = json::parse(read_file(dir / "m.json"));
  j["format_version"] = 99;
  write_file_atomic(dir / "bad2.json", j.dump());
  CHECK_THROWS_AS(load_checkpoint(dir / "bad2.json"), FormatError);

  write_file_atomic(dir / "garbage.json", "{not json");
  CHECK_THROWS_AS(load_checkpoint(dir / "garbage.json"), FormatError);

  const ConceptTaxonomy other = testing::small_taxonomy(3);
  CHECK_THROWS_WITH_AS(load_checkpoint(dir / "m.json", &other), doctest::Contains("hash"),
                       ValidationError);
}

TEST_CASE("model hash tracks parameters, thresholds and version") {
  JoelNetwork net = build(arch_of(3, {4}), testing::small_taxonomy(2), 1);
  const std::string h = model_hash(net);
  JoelNetwork a = net;
  a.version += 1;
  JoelNetwork b = net;
  b.concept_thresholds[0] = 0.4;
  JoelNetwork c = net;
  c.layers[0].W(0, 0) = std::nextafter(c.layers[0].W(0, 0), 10.0);
  CHECK(model_hash(a) != h);
  CHECK(model_hash(b) != h);
  CHECK(model_hash(c) != h);
  CHECK(model_hash(build(arch_of(3, {4}), testing::small_taxonomy(2), 1)) == h);
}
