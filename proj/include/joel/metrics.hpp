#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace joel {

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

// Thresholds at every distinct score (descending), from (0,0) to (1,1).
// Throws ValidationError unless both classes are present.
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels);

// Probability that a random positive outscores a random negative, ties
// counting one half. Sort-based, O(n log n).
double auc(std::span<const double> scores, std::span<const int> labels);

// Operating point chosen at the smallest distinct score whose FPR (fraction of
// negatives scoring >= it) does not exceed `target`. Tied scores enter or
// leave together, so the achieved FPR may undershoot but never overshoot.
struct OperatingPoint {
  // nullopt when even the top tie group exceeds the target: nothing fires.
  std::optional<double> threshold;
  double fpr = 0.0;
  double recall = 0.0;
  double precision = 0.0;  // 0 when nothing fires
  std::size_t true_positives = 0;
  std::size_t false_positives = 0;
};

OperatingPoint operating_point_at_fpr(std::span<const double> scores, std::span<const int> labels,
                                      double target);
double recall_at_fpr(std::span<const double> scores, std::span<const int> labels, double target);
double precision_at_fpr(std::span<const double> scores, std::span<const int> labels,
                        double target);

struct LabelMetrics {
  std::string label;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  bool single_class = false;  // metrics below undefined when true
  std::vector<RocPoint> roc;
  double auc = 0.0;
  double fpr_target = 0.0;
  double recall_at_fpr = 0.0;
  double precision_at_fpr = 0.0;
  std::optional<double> threshold;
};

LabelMetrics label_metrics(std::string label, std::span<const double> scores,
                           std::span<const int> labels, double fpr_target);

struct MetricsReport {
  LabelMetrics decision;
  std::vector<LabelMetrics> concepts;  // taxonomy order
  double mean_auc = 0.0;
  std::vector<std::string> mean_auc_labels;  // concepts averaged
  std::vector<std::string> excluded;         // fallback or single-class concepts

  const LabelMetrics* find_concept(std::string_view id) const;

  // ROC curves are subsampled to at most `max_roc_points` evenly spaced points.
  nlohmann::json to_json(std::size_t max_roc_points = 1000) const;
};

// Evenly subsamples a curve keeping both endpoints.
std::vector<RocPoint> subsample_roc(const std::vector<RocPoint>& roc, std::size_t max_points);

}  // namespace joel
