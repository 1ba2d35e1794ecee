#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include <nlohmann/json.hpp>

#include "joel/error.hpp"
#include "joel/model.hpp"
#include "joel/pipeline.hpp"
#include "joel/synth.hpp"
#include "joel/trainer.hpp"
#include "support.hpp"

using namespace joel;
using nlohmann::json;

namespace {

EncodedSet noise_set(Rng& rng, std::size_t n, std::size_t d, std::size_t k) {
  EncodedSet set;
  set.x = Matrix(n, d);
  for (auto& v : set.x.flat()) v = rng.normal();
  set.concepts = Matrix(n, k);
  for (std::size_t r = 0; r < n; ++r) {
    set.labels.push_back(rng.bernoulli(0.3) ? 1 : 0);
    set.event_ids.push_back("e" + std::to_string(r));
    for (std::size_t c = 0; c < k; ++c) set.concepts(r, c) = rng.bernoulli(0.4);
  }
  return set;
}

// Labels follow a linear rule so the network can learn something.
EncodedSet learnable_set(Rng& rng, std::size_t n, std::size_t d, std::size_t k) {
  EncodedSet set = noise_set(rng, n, d, k);
  for (std::size_t r = 0; r < n; ++r) {
    set.labels[r] = set.x(r, 0) + 0.5 * set.x(r, 1) > 0.8 ? 1 : 0;
    for (std::size_t c = 0; c < k; ++c) set.concepts(r, c) = set.x(r, c % d) > 0.3 ? 1.0 : 0.0;
  }
  return set;
}

Architecture arch_of(std::size_t in, std::vector<std::size_t> trunk) {
  Architecture a;
  a.input_dim = in;
  a.trunk_widths = std::move(trunk);
  return a;
}

GridResult fake_result(std::size_t index, double recall, double mean_auc) {
  GridResult r;
  r.index = index;
  r.entry.name = "cfg" + std::to_string(index);
  r.ok = true;
  r.test.decision.recall_at_fpr = recall;
  r.test.mean_auc = mean_auc;
  return r;
}

}  // namespace

TEST_CASE("early stopping on the reference loss fixture") {
  const std::vector<double> losses{.50, .49, .49, .50, .51, .52, .53, .54};
  EarlyStopping es(5);
  std::size_t stopped_at = 0;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    es.update(losses[i]);
    if (es.should_stop()) {
      stopped_at = i + 1;
      break;
    }
  }
  CHECK(es.best_epoch() == 2);
  CHECK(es.best_loss() == 0.49);
  CHECK(stopped_at == 7);
}

TEST_CASE("early stopping never fires on improving losses") {
  EarlyStopping es(100);
  for (int i = 0; i < 100; ++i) {
    CHECK(es.update(1.0 - i * 1e-3));
    CHECK_FALSE(es.should_stop());
  }
  CHECK(es.best_epoch() == 100);
}

TEST_CASE("train stops after patience and restores the best epoch bitwise") {
  Rng rng(1);
  const ConceptTaxonomy tax = testing::small_taxonomy(3);
  const EncodedSet tr = noise_set(rng, 120, 12, tax.size());
  const EncodedSet va = noise_set(rng, 60, 12, tax.size());
  TrainConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.batch_size = 32;
  cfg.max_epochs = 200;
  cfg.seed = 3;
  const TrainResult res = train(build(arch_of(12, {32, 32}), tax, 2), tr, va, cfg);
  REQUIRE(res.early_stopped);
  CHECK(res.history.size() == res.best_epoch + cfg.patience);
  for (std::size_t e = res.best_epoch; e < res.history.size(); ++e) {
    CHECK_FALSE(res.history[e].improved);
  }
  const double restored = evaluate_loss(res.net, va, cfg.lambda).total;
  const double recorded = res.history[res.best_epoch - 1].validation_loss;
  CHECK(std::memcmp(&restored, &recorded, sizeof(double)) == 0);
  CHECK(res.best_validation_loss == recorded);
}

TEST_CASE("train runs every epoch when patience exceeds the budget") {
  Rng rng(2);
  const ConceptTaxonomy tax = testing::small_taxonomy(2);
  const EncodedSet tr = learnable_set(rng, 200, 6, tax.size());
  const EncodedSet va = learnable_set(rng, 100, 6, tax.size());
  TrainConfig cfg;
  cfg.max_epochs = 12;
  cfg.patience = 12;
  cfg.batch_size = 64;
  cfg.learning_rate = 1e-2;
  const TrainResult res = train(build(arch_of(6, {8}), tax, 1), tr, va, cfg);
  CHECK(res.history.size() == 12);
  CHECK_FALSE(res.early_stopped);
}

TEST_CASE("training is deterministic and bumps the version per step") {
  Rng rng(3);
  const ConceptTaxonomy tax = testing::small_taxonomy(2);
  const EncodedSet tr = learnable_set(rng, 300, 6, tax.size());
  const EncodedSet va = learnable_set(rng, 100, 6, tax.size());
  TrainConfig cfg;
  cfg.max_epochs = 5;
  cfg.batch_size = 50;
  cfg.seed = 9;
  auto run = [&] { return train(build(arch_of(6, {8, 8}), tax, 4), tr, va, cfg); };
  const TrainResult a = run();
  const TrainResult b = run();
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].validation_loss == b.history[i].validation_loss);
    CHECK(a.history[i].train_loss.total == b.history[i].train_loss.total);
  }
  CHECK(model_hash(a.net) == model_hash(b.net));
  const std::size_t negatives = tr.size() - tr.positives();
  const std::size_t steps_per_epoch = (negatives + 49) / 50;
  CHECK(a.net.version == a.best_epoch * steps_per_epoch);
}

TEST_CASE("training without positives is rejected") {
  Rng rng(4);
  const ConceptTaxonomy tax = testing::small_taxonomy(2);
  EncodedSet tr = noise_set(rng, 50, 4, tax.size());
  std::fill(tr.labels.begin(), tr.labels.end(), 0);
  CHECK_THROWS_AS(train(build(arch_of(4, {4}), tax, 1), tr, tr, TrainConfig{}), ValidationError);
}

TEST_CASE("mean AUC over the fourteen-concept taxonomy skips the fallbacks") {
  Rng rng(5);
  const ConceptTaxonomy tax = fraud_taxonomy();
  JoelNetwork net = build(arch_of(5, {16}), tax, 3);
  for (auto& l : net.layers) {
    for (auto& v : l.b) v = rng.normal() * 0.3;
  }
  EncodedSet data = noise_set(rng, 300, 5, tax.size());
  const Scores s = score(net, data.x);

  SUBCASE("labels ordered like the scores give AUC 1") {
    for (std::size_t c = 0; c < tax.size(); ++c) {
      std::vector<double> col;
      for (std::size_t r = 0; r < data.size(); ++r) col.push_back(s.concepts(r, c));
      std::vector<double> sorted = col;
      std::nth_element(sorted.begin(), sorted.begin() + 150, sorted.end());
      for (std::size_t r = 0; r < data.size(); ++r) data.concepts(r, c) = col[r] >= sorted[150];
    }
    const MetricsReport rep = evaluate(net, data);
    CHECK(rep.mean_auc_labels.size() == 12);
    CHECK(rep.mean_auc == doctest::Approx(1.0).epsilon(1e-15));
  }
  SUBCASE("random labels: mean equals the recomputed average") {
    const MetricsReport rep = evaluate(net, data);
    REQUIRE(rep.mean_auc_labels.size() == 12);
    double sum = 0.0;
    for (std::size_t c = 0; c < tax.size(); ++c) {
      if (tax.at(c).is_fallback()) continue;
      std::vector<double> col;
      std::vector<int> lab;
      for (std::size_t r = 0; r < data.size(); ++r) {
        col.push_back(s.concepts(r, c));
        lab.push_back(data.concepts(r, c) > 0.5);
      }
      sum += auc(col, lab);
    }
    CHECK(std::fabs(rep.mean_auc - sum / 12.0) <= 1e-12);
    CHECK(rep.excluded == std::vector<std::string>{"other_legit", "other_fraud"});
  }
}

TEST_CASE("ranking by recall, then mean AUC, then grid index") {
  std::vector<GridResult> results{fake_result(0, 0.1080, 0.9), fake_result(1, 0.2173, 0.5)};
  auto ranked = rank(results);
  CHECK(ranked[0]->index == 1);

  results = {fake_result(0, 0.3, 0.8), fake_result(1, 0.3, 0.9)};
  CHECK(rank(results)[0]->index == 1);

  results = {fake_result(0, 0.3, 0.9), fake_result(1, 0.3, 0.9)};
  CHECK(rank(results)[0]->index == 0);

  results = {fake_result(0, 0.3, 0.9)};
  CHECK(&select_best(rank(results)) == &results[0]);

  results.clear();
  Rng rng(6);
  std::size_t best = 0;
  double best_recall = -1;
  for (std::size_t i = 0; i < 70; ++i) {
    const double r = static_cast<double>(rng.below(1000)) / 1000.0;
    results.push_back(fake_result(i, r, rng.uniform()));
    if (r > best_recall) {
      best_recall = r;
      best = i;
    }
  }
  results[5].ok = false;
  results[5].test.decision.recall_at_fpr = 2.0;  // failed entries never rank
  CHECK(select_best(rank(results)).index == best);
  const json rep = selection_report(results);
  CHECK(rep["tradeoff"].size() == 70);
  CHECK(rep["ranking"].size() == 69);
  CHECK_THROWS_AS(select_best({}), ValidationError);
}

TEST_CASE("grid file expansion") {
  const json j = json::parse(R"({
    "train": {"learning_rate": 0.01, "max_epochs": 7, "seed": 5},
    "configs": [{"name": "explicit", "arch": {"trunk_widths": [16, 16, 16]}}],
    "expand": {"trunk_widths": [[32, 16, 16], [64, 32, 16]], "dropout": [0.0, 0.2],
               "batch_norm": [false, true]}
  })");
  const auto grid = grid_from_json(j);
  REQUIRE(grid.size() == 9);
  CHECK(grid[0].name == "explicit");
  CHECK(grid[0].train.max_epochs == 7);
  CHECK(grid[0].train.learning_rate == 0.01);
  std::set<std::string> names;
  for (const auto& g : grid) names.insert(g.name);
  CHECK(names.size() == 9);
  std::size_t bn = 0;
  for (std::size_t i = 1; i < grid.size(); ++i) bn += grid[i].arch.batch_norm;
  CHECK(bn == 4);
  CHECK_THROWS_AS(grid_from_json(json::parse(R"({"configs": []})")), ValidationError);
}

TEST_CASE("config json round trip") {
  TrainConfig c;
  c.learning_rate = 0.02;
  c.optimizer = nn::OptimizerKind::sgd;
  c.lambda = 0.5;
  c.seed = 99;
  const TrainConfig back = TrainConfig::from_json(c.to_json());
  CHECK(back.learning_rate == 0.02);
  CHECK(back.optimizer == nn::OptimizerKind::sgd);
  CHECK(back.lambda == 0.5);
  CHECK(back.seed == 99);
  TrainConfig bad;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("small grid search end to end") {
  SynthConfig sc = SynthConfig::standard(6000);
  const SynthData data = generate_synthetic(sc, 4);
  PipelineConfig pc;
  pc.seed = 2;
  GridEntry a{"a", arch_of(0, {16}), {}};
  a.train.max_epochs = 4;
  a.train.learning_rate = 0.01;
  a.train.batch_size = 512;
  GridEntry b = a;
  b.name = "b";
  b.arch.trunk_widths = {8, 8};
  pc.grid = {a, b};
  pc.threads = 2;
  const RawTable raw{data.schema, data.events, 0};
  const PipelineResult r1 = run_pipeline(raw, data.mapping, data.taxonomy, pc);
  pc.threads = 1;
  const PipelineResult r2 = run_pipeline(raw, data.mapping, data.taxonomy, pc);
  REQUIRE(r1.results.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(r1.results[i].ok);
    CHECK(model_hash(r1.results[i].training->net) == model_hash(r2.results[i].training->net));
  }
  CHECK(r1.selection["selected_name"] == r2.selection["selected_name"]);
  CHECK(r1.selected.codec.has_value());
  CHECK(r1.split_sizes[0] + r1.split_sizes[1] + r1.split_sizes[2] + r1.split_sizes[3] == 6000);
}
