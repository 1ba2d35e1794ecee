#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include <nlohmann/json.hpp>

#include "joel/metrics.hpp"
#include "joel/rng.hpp"

using namespace joel;

namespace {

// Brute-force pairwise AUC: P(score_pos > score_neg) + 0.5 P(tie).
double auc_oracle(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0;
  double pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  }
  return wins / pairs;
}

struct Enumerated {
  double recall = 0.0;
  double precision = 0.0;
  bool any = false;
};

// Tries every distinct score as a ">=" threshold, lowest first, and keeps
// the first one within the FPR target.
Enumerated recall_oracle(const std::vector<double>& s, const std::vector<int>& y, double target) {
  std::size_t pos = 0, neg = 0;
  for (int v : y) (v ? pos : neg)++;
  Enumerated best;
  for (double t : std::set<double>(s.begin(), s.end())) {
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] >= t) (y[i] ? tp : fp)++;
    }
    if (static_cast<double>(fp) > target * static_cast<double>(neg) + 1e-9) continue;
    best.any = true;
    best.recall = static_cast<double>(tp) / static_cast<double>(pos);
    best.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    break;
  }
  return best;
}

struct Dataset {
  std::vector<double> s;
  std::vector<int> y;
};

Dataset random_dataset(Rng& rng, int kind) {
  Dataset d;
  const std::size_t n = 2 + rng.below(499);
  const double p = rng.uniform(0.02, 0.6);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = rng.bernoulli(p);
    double s = 0.0;
    switch (kind) {
      case 0: s = rng.uniform() + 0.3 * y; break;                        // continuous
      case 1: s = static_cast<double>(rng.below(6)) + (y && rng.bernoulli(0.3)); break;  // heavy ties
      case 2: s = 0.25; break;                                          // single score
      default: s = y ? 1.0 - 0.1 * rng.uniform() : 0.1 * rng.uniform(); break;  // separated
    }
    d.s.push_back(s);
    d.y.push_back(y);
  }
  d.y[0] = 1;
  d.y[1] = 0;
  return d;
}

}  // namespace

TEST_CASE("auc basics") {
  CHECK(auc(std::vector<double>{0.9, 0.8, 0.1, 0.2}, std::vector<int>{1, 1, 0, 0}) == 1.0);
  CHECK(auc(std::vector<double>{0.1, 0.2, 0.9, 0.8}, std::vector<int>{1, 1, 0, 0}) == 0.0);
  CHECK(auc(std::vector<double>(10, 0.3), std::vector<int>{1, 0, 1, 0, 0, 0, 1, 0, 0, 0}) == 0.5);
}

TEST_CASE("roc curve endpoints and monotonicity") {
  Rng rng(2);
  const Dataset d = random_dataset(rng, 1);
  const auto roc = roc_curve(d.s, d.y);
  REQUIRE(roc.size() >= 2);
  CHECK(roc.front().fpr == 0.0);
  CHECK(roc.front().tpr == 0.0);
  CHECK(roc.back().fpr == 1.0);
  CHECK(roc.back().tpr == 1.0);
  for (std::size_t i = 1; i < roc.size(); ++i) {
    CHECK(roc[i].fpr >= roc[i - 1].fpr);
    CHECK(roc[i].tpr >= roc[i - 1].tpr);
  }
  // trapezoid area under the tie-grouped curve equals the pairwise AUC
  double area = 0.0;
  for (std::size_t i = 1; i < roc.size(); ++i) {
    area += (roc[i].fpr - roc[i - 1].fpr) * (roc[i].tpr + roc[i - 1].tpr) / 2.0;
  }
  CHECK(area == doctest::Approx(auc_oracle(d.s, d.y)).epsilon(1e-12));
}

TEST_CASE("recall at fpr basics") {
  const std::vector<double> s{0.9, 0.8, 0.7, 0.3, 0.2, 0.1};
  const std::vector<int> y{1, 1, 1, 0, 0, 0};
  CHECK(recall_at_fpr(s, y, 0.0) == 1.0);
  CHECK(recall_at_fpr(s, y, 0.03) == 1.0);
  CHECK(precision_at_fpr(s, y, 0.03) == 1.0);
  const std::vector<double> bad{0.1, 0.2, 0.3, 0.7, 0.8, 0.9};
  CHECK(recall_at_fpr(bad, y, 1.0) == 1.0);
  const auto op = operating_point_at_fpr(bad, y, 1.0);
  REQUIRE(op.threshold.has_value());
  CHECK(*op.threshold == 0.1);
}

TEST_CASE("perfectly separated: threshold is the lowest positive score") {
  const std::vector<double> s{0.95, 0.6, 0.55, 0.5, 0.2, 0.1};
  const std::vector<int> y{1, 1, 1, 0, 0, 0};
  const auto op = operating_point_at_fpr(s, y, 0.03);
  REQUIRE(op.threshold.has_value());
  CHECK(*op.threshold == 0.55);
  CHECK(op.fpr == 0.0);
  CHECK(op.recall == 1.0);
}

TEST_CASE("hundred negatives at 3 percent admit at most three false positives") {
  Rng rng(5);
  std::vector<double> s;
  std::vector<int> y;
  for (int i = 0; i < 100; ++i) {
    s.push_back(rng.uniform());
    y.push_back(0);
  }
  for (int i = 0; i < 20; ++i) {
    s.push_back(rng.uniform(0.5, 1.2));
    y.push_back(1);
  }
  const auto op = operating_point_at_fpr(s, y, 0.03);
  CHECK(op.false_positives <= 3);
  const Enumerated e = recall_oracle(s, y, 0.03);
  CHECK(op.recall == doctest::Approx(e.recall).epsilon(1e-12));
}

TEST_CASE("all-tied scores exceed any small target and fire nothing") {
  const std::vector<double> s(8, 0.4);
  const std::vector<int> y{1, 0, 1, 0, 0, 0, 0, 0};
  const auto op = operating_point_at_fpr(s, y, 0.2);
  CHECK_FALSE(op.threshold.has_value());
  CHECK(op.recall == 0.0);
  CHECK(op.precision == 0.0);
  CHECK(op.fpr == 0.0);
}

TEST_CASE("metric oracles on 200 random datasets") {
  Rng rng(2024);
  for (int i = 0; i < 200; ++i) {
    const Dataset d = random_dataset(rng, i % 4);
    CHECK(std::fabs(auc(d.s, d.y) - auc_oracle(d.s, d.y)) <= 1e-9);
    for (double target : {0.0, 0.03, 0.2, 0.5}) {
      const auto op = operating_point_at_fpr(d.s, d.y, target);
      const Enumerated e = recall_oracle(d.s, d.y, target);
      REQUIRE(op.threshold.has_value() == e.any);
      CHECK(std::fabs(op.recall - e.recall) <= 1e-12);
      CHECK(std::fabs(op.precision - e.precision) <= 1e-12);
    }
  }
}

TEST_CASE("label metrics flag single-class labels") {
  const LabelMetrics m =
      label_metrics("c", std::vector<double>{0.1, 0.2}, std::vector<int>{0, 0}, 0.2);
  CHECK(m.single_class);
  CHECK(m.negatives == 2);
  const LabelMetrics ok =
      label_metrics("c", std::vector<double>{0.1, 0.9}, std::vector<int>{0, 1}, 0.2);
  CHECK_FALSE(ok.single_class);
  CHECK(ok.auc == 1.0);
}

TEST_CASE("roc subsampling keeps endpoints") {
  std::vector<RocPoint> roc;
  for (int i = 0; i <= 1000; ++i) roc.push_back({i / 1000.0, std::sqrt(i / 1000.0)});
  const auto sub = subsample_roc(roc, 11);
  CHECK(sub.size() == 11);
  CHECK(sub.front().fpr == 0.0);
  CHECK(sub.back().fpr == 1.0);
  CHECK(subsample_roc(roc, 5000).size() == roc.size());
}

TEST_CASE("report json and concept lookup") {
  MetricsReport r;
  r.decision = label_metrics("fraud", std::vector<double>{0.1, 0.9}, std::vector<int>{0, 1}, 0.03);
  r.concepts.push_back(
      label_metrics("a", std::vector<double>{0.1, 0.9}, std::vector<int>{0, 1}, 0.2));
  r.mean_auc = 1.0;
  r.mean_auc_labels = {"a"};
  CHECK(r.find_concept("a") != nullptr);
  CHECK(r.find_concept("zz") == nullptr);
  const auto j = r.to_json();
  CHECK(j["mean_auc"] == 1.0);
  CHECK(j["decision"]["auc"] == 1.0);
}
