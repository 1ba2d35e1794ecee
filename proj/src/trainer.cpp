#include "joel/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <thread>

#include "joel/error.hpp"
#include "joel/rng.hpp"

namespace joel {

using nlohmann::json;

void TrainConfig::validate() const {
  if (max_epochs < 1) throw ValidationError("max_epochs must be >= 1");
  if (patience < 1) throw ValidationError("patience must be >= 1");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (min_positives < 1 || min_positives > batch_size) {
    throw ValidationError("min_positives must be in [1, batch_size]");
  }
  if (!(learning_rate > 0.0)) throw ValidationError("learning_rate must be positive");
  if (!(lambda >= 0.0)) throw ValidationError("lambda must be >= 0");
}

json TrainConfig::to_json() const {
  return {{"max_epochs", max_epochs},       {"patience", patience},
          {"batch_size", batch_size},       {"min_positives", min_positives},
          {"optimizer", nn::to_string(optimizer)}, {"learning_rate", learning_rate},
          {"seed", seed},                   {"lambda", lambda}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.min_positives = j.value("min_positives", c.min_positives);
  if (j.contains("optimizer")) c.optimizer = nn::optimizer_from_string(j.at("optimizer").get<std::string>());
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.seed = j.value("seed", c.seed);
  c.lambda = j.value("lambda", c.lambda);
  return c;
}

EarlyStopping::EarlyStopping(std::size_t patience)
    : patience_(patience), best_(std::numeric_limits<double>::infinity()) {
  if (patience < 1) throw ValidationError("patience must be >= 1");
}

bool EarlyStopping::update(double loss) {
  ++epochs_;
  if (loss < best_) {
    best_ = loss;
    best_epoch_ = epochs_;
    stale_ = 0;
    return true;
  }
  ++stale_;
  return false;
}

TrainResult train(JoelNetwork net, const EncodedSet& train_set, const EncodedSet& validation,
                  const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (validation.size() == 0) throw ValidationError("validation set is empty");
  if (train_set.x.cols() != net.arch.input_dim) {
    throw ValidationError("training data width does not match the network input");
  }
  nn::OptimizerState opt = nn::OptimizerState::make(cfg.optimizer, cfg.learning_rate);
  EarlyStopping stopper(cfg.patience);
  TrainResult result;
  std::optional<JoelNetwork> best;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const BatchPlan plan{cfg.batch_size, cfg.min_positives, mix_seed(cfg.seed, epoch)};
    const auto batches = sample_batches(train_set.labels, plan);
    EpochReport report;
    report.epoch = epoch;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& rows = batches[bi];
      const Matrix x = gather_rows(train_set.x, rows);
      const Matrix y = train_set.decision_targets(rows);
      const Matrix s = gather_rows(train_set.concepts, rows);
      const auto trace = nn::forward(net.layers, x, nn::Mode::train,
                                     mix_seed(mix_seed(cfg.seed, epoch), bi + 1'000'000));
      const JointGradients g = joint_backward(net, trace, y, s, cfg.lambda);
      nn::update_running_stats(net.layers, trace);
      nn::step(net.layers, g.grads, opt);
      ++net.version;
      report.train_loss.decision += g.loss.decision;
      report.train_loss.semantic += g.loss.semantic;
      report.train_loss.total += g.loss.total;
    }
    const double nb = static_cast<double>(batches.size());
    report.train_loss.decision /= nb;
    report.train_loss.semantic /= nb;
    report.train_loss.total /= nb;
    report.validation_loss = evaluate_loss(net, validation, cfg.lambda).total;
    if (!std::isfinite(report.validation_loss)) {
      throw ValidationError("validation loss diverged at epoch " + std::to_string(epoch));
    }
    report.improved = stopper.update(report.validation_loss);
    if (report.improved) best = net;
    result.history.push_back(report);
    if (on_epoch) on_epoch(report);
    if (stopper.should_stop()) {
      result.early_stopped = true;
      break;
    }
  }
  result.net = std::move(*best);
  result.best_epoch = stopper.best_epoch();
  result.best_validation_loss = stopper.best_loss();
  return result;
}

MetricsReport evaluate(const JoelNetwork& net, const EncodedSet& data, const EvalTargets& targets) {
  if (data.size() == 0) throw ValidationError("cannot evaluate on an empty set");
  const Scores s = score(net, data.x);
  MetricsReport report;
  report.decision = label_metrics("decision", s.fraud, data.labels, targets.decision_fpr);
  const std::size_t n = data.size();
  std::vector<double> col(n);
  std::vector<int> lab(n);
  double sum = 0.0;
  for (std::size_t c = 0; c < net.concept_count(); ++c) {
    for (std::size_t r = 0; r < n; ++r) {
      col[r] = s.concepts(r, c);
      lab[r] = data.concepts(r, c) > 0.5 ? 1 : 0;
    }
    const Concept& concept_def = net.taxonomy.at(c);
    LabelMetrics m = label_metrics(concept_def.id, col, lab, targets.concept_fpr);
    if (concept_def.is_fallback() || m.single_class) {
      report.excluded.push_back(concept_def.id);
    } else {
      sum += m.auc;
      report.mean_auc_labels.push_back(concept_def.id);
    }
    report.concepts.push_back(std::move(m));
  }
  if (!report.mean_auc_labels.empty()) {
    report.mean_auc = sum / static_cast<double>(report.mean_auc_labels.size());
  }
  return report;
}

json GridEntry::to_json() const {
  return {{"name", name}, {"arch", arch.to_json()}, {"train", train.to_json()}};
}

GridEntry GridEntry::from_json(const json& j) {
  GridEntry e;
  e.name = j.value("name", std::string{});
  e.arch = Architecture::from_json(j.at("arch"));
  e.train = TrainConfig::from_json(j.value("train", json::object()));
  return e;
}

std::vector<GridEntry> grid_from_json(const json& j) {
  const json defaults = j.value("train", json::object());
  std::vector<GridEntry> grid;
  for (const json& c : j.value("configs", json::array())) {
    json merged = c;
    json train = defaults;
    train.update(c.value("train", json::object()));
    merged["train"] = train;
    grid.push_back(GridEntry::from_json(merged));
  }
  if (j.contains("expand")) {
    const json& ex = j.at("expand");
    const auto widths = ex.at("trunk_widths").get<std::vector<std::vector<std::size_t>>>();
    const auto dropouts = ex.value("dropout", std::vector<double>{0.0});
    const auto bns = ex.value("batch_norm", std::vector<bool>{false});
    const TrainConfig base = TrainConfig::from_json(defaults);
    const auto lrs = ex.value("learning_rate", std::vector<double>{base.learning_rate});
    const auto lambdas = ex.value("lambda", std::vector<double>{base.lambda});
    for (const auto& w : widths) {
      for (double d : dropouts) {
        for (bool bn : bns) {
          for (double lr : lrs) {
            for (double lam : lambdas) {
              GridEntry e;
              e.arch.trunk_widths = w;
              e.arch.trunk_dropout = {d};
              e.arch.batch_norm = bn;
              e.train = base;
              e.train.learning_rate = lr;
              e.train.lambda = lam;
              e.train.seed = mix_seed(base.seed, grid.size());
              e.name = "g" + std::to_string(grid.size());
              grid.push_back(std::move(e));
            }
          }
        }
      }
    }
  }
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (grid[i].name.empty()) grid[i].name = "g" + std::to_string(i);
  }
  if (grid.empty()) throw ValidationError("grid is empty");
  return grid;
}

namespace {

GridResult run_entry(std::size_t index, const GridEntry& entry, const EncodedSplits& data,
                     const ConceptTaxonomy& tax, const EvalTargets& targets) {
  GridResult r;
  r.index = index;
  r.entry = entry;
  try {
    Architecture arch = entry.arch;
    arch.input_dim = data.train.x.cols();
    r.entry.arch = arch;
    JoelNetwork net = build(arch, tax, mix_seed(entry.train.seed, 0xB011D), entry.train.lambda);
    TrainResult tr = train(std::move(net), data.train, data.validation, entry.train);
    calibrate_thresholds(tr.net, data.validation, targets.decision_fpr, targets.concept_fpr);
    r.test = evaluate(tr.net, data.test, targets);
    if (data.production.size() > 0) r.production = evaluate(tr.net, data.production, targets);
    r.training = std::move(tr);
    r.ok = true;
  } catch (const std::exception& e) {
    r.ok = false;
    r.error = e.what();
  }
  return r;
}

}  // namespace

std::vector<GridResult> grid_search(const std::vector<GridEntry>& grid, const EncodedSplits& data,
                                    const ConceptTaxonomy& tax, const GridOptions& options) {
  if (grid.empty()) throw ValidationError("grid is empty");
  std::vector<GridResult> results(grid.size());
  const std::size_t threads = std::clamp<std::size_t>(options.threads, 1, grid.size());
  std::mutex report_mutex;
  auto finish = [&](std::size_t i) {
    results[i] = run_entry(i, grid[i], data, tax, options.targets);
    if (options.on_result) {
      std::lock_guard lock(report_mutex);
      options.on_result(results[i]);
    }
  };
  if (threads == 1) {
    for (std::size_t i = 0; i < grid.size(); ++i) finish(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < grid.size(); i = next++) finish(i);
      });
    }
    for (auto& th : pool) th.join();
  }
  if (std::none_of(results.begin(), results.end(), [](const GridResult& r) { return r.ok; })) {
    throw ValidationError("every grid configuration failed; first error: " + results.front().error);
  }
  return results;
}

std::vector<const GridResult*> rank(const std::vector<GridResult>& results) {
  std::vector<const GridResult*> ranked;
  for (const auto& r : results) {
    if (r.ok) ranked.push_back(&r);
  }
  std::sort(ranked.begin(), ranked.end(), [](const GridResult* a, const GridResult* b) {
    if (a->fraud_recall() != b->fraud_recall()) return a->fraud_recall() > b->fraud_recall();
    if (a->test.mean_auc != b->test.mean_auc) return a->test.mean_auc > b->test.mean_auc;
    return a->index < b->index;
  });
  return ranked;
}

const GridResult& select_best(const std::vector<const GridResult*>& ranked) {
  if (ranked.empty()) throw ValidationError("no successful configuration to select");
  return *ranked.front();
}

json selection_report(const std::vector<GridResult>& results) {
  const auto ranked = rank(results);
  json table = json::array();
  for (const auto& r : results) {
    json row{{"index", r.index}, {"name", r.entry.name}, {"ok", r.ok}};
    if (r.ok) {
      row["test_fraud_recall"] = r.fraud_recall();
      row["test_mean_auc"] = r.test.mean_auc;
      row["test_decision_auc"] = r.test.decision.auc;
      if (r.production) {
        row["production_fraud_recall"] = r.production->decision.recall_at_fpr;
        row["production_mean_auc"] = r.production->mean_auc;
      }
      row["best_epoch"] = r.training->best_epoch;
      row["epochs_run"] = r.training->history.size();
    } else {
      row["error"] = r.error;
    }
    table.push_back(std::move(row));
  }
  json order = json::array();
  for (const auto* r : ranked) order.push_back(r->index);
  json out{{"ranking", order}, {"tradeoff", table}};
  if (!ranked.empty()) {
    out["selected"] = ranked.front()->index;
    out["selected_name"] = ranked.front()->entry.name;
  }
  return out;
}

}  // namespace joel
