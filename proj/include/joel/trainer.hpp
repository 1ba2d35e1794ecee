#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "joel/dataset.hpp"
#include "joel/metrics.hpp"
#include "joel/model.hpp"
#include "joel/nn.hpp"

namespace joel {

struct TrainConfig {
  std::size_t max_epochs = 100;
  std::size_t patience = 5;
  std::size_t batch_size = 4096;
  std::size_t min_positives = 1;
  nn::OptimizerKind optimizer = nn::OptimizerKind::adam;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  double lambda = 1.0;

  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep their defaults.
  static TrainConfig from_json(const nlohmann::json& j);
};

// Strict-decrease rule with min_delta 0: an epoch improves iff its loss is
// below the best so far. Stops after `patience` consecutive non-improving
// epochs.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience);

  // Records the next epoch's validation loss; returns whether it improved.
  bool update(double loss);
  bool should_stop() const { return stale_ >= patience_; }
  std::size_t best_epoch() const { return best_epoch_; }  // 1-based, 0 before any update
  double best_loss() const { return best_; }
  std::size_t epochs() const { return epochs_; }

 private:
  std::size_t patience_;
  std::size_t stale_ = 0;
  std::size_t epochs_ = 0;
  std::size_t best_epoch_ = 0;
  double best_;
};

struct EpochReport {
  std::size_t epoch = 0;  // 1-based
  JointLoss train_loss;   // mean over the epoch's batches
  double validation_loss = 0.0;
  bool improved = false;
};

struct TrainResult {
  JoelNetwork net;  // weights of the best validation epoch
  std::vector<EpochReport> history;
  std::size_t best_epoch = 0;
  double best_validation_loss = 0.0;
  bool early_stopped = false;
};

using EpochCallback = std::function<void(const EpochReport&)>;

// Mini-batch training with prevalence-constrained batches, evaluated on the
// validation set after every epoch. Each optimizer step bumps the network
// version. Throws ValidationError when the training set has no positives.
TrainResult train(JoelNetwork net, const EncodedSet& train_set, const EncodedSet& validation,
                  const TrainConfig& cfg, const EpochCallback& on_epoch = {});

struct EvalTargets {
  double decision_fpr = 0.03;
  double concept_fpr = 0.20;
};

// Decision and per-concept metrics. mean_auc averages the concept AUCs,
// skipping fallback concepts and concepts with one class in `data`.
MetricsReport evaluate(const JoelNetwork& net, const EncodedSet& data,
                       const EvalTargets& targets = {});

struct GridEntry {
  std::string name;
  Architecture arch;  // input_dim is taken from the data
  TrainConfig train;

  nlohmann::json to_json() const;
  static GridEntry from_json(const nlohmann::json& j);
};

// Grid file: {"train": {defaults}, "configs": [GridEntry...], "expand": {
// "trunk_widths": [[...], ...], "dropout": [...], "batch_norm": [...],
// "learning_rate": [...], "lambda": [...]}}. Expanded entries are appended
// after the explicit ones in row-major order of the listed keys.
std::vector<GridEntry> grid_from_json(const nlohmann::json& j);

struct EncodedSplits {
  EncodedSet train;
  EncodedSet validation;
  EncodedSet test;
  EncodedSet production;
};

struct GridResult {
  std::size_t index = 0;
  GridEntry entry;
  bool ok = false;
  std::string error;
  std::optional<TrainResult> training;
  MetricsReport test;
  std::optional<MetricsReport> production;

  double fraud_recall() const { return test.decision.recall_at_fpr; }
};

struct GridOptions {
  EvalTargets targets;
  std::size_t threads = 1;
  std::function<void(const GridResult&)> on_result;
};

// Trains, calibrates (on validation) and tests every entry. Results come back
// in grid order regardless of threading; failed entries are recorded. Throws
// ValidationError on an empty grid or when every entry fails.
std::vector<GridResult> grid_search(const std::vector<GridEntry>& grid, const EncodedSplits& data,
                                    const ConceptTaxonomy& tax, const GridOptions& options = {});

// Successful results ordered by test fraud recall, then mean AUC, then grid
// index.
std::vector<const GridResult*> rank(const std::vector<GridResult>& results);

// Throws ValidationError on an empty ranking.
const GridResult& select_best(const std::vector<const GridResult*>& ranked);

// Ranking plus the recall vs mean-AUC trade-off table (one row per grid entry).
nlohmann::json selection_report(const std::vector<GridResult>& results);

}  // namespace joel
