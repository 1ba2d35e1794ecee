#include "joel/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>

#include <nlohmann/json.hpp>

#include "joel/error.hpp"

namespace joel {

using nlohmann::json;

namespace {

// Slack for comparing fp/N against the target so that e.g. 3/100 <= 0.03.
constexpr double kFprSlack = 1e-12;

struct Counts {
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

Counts count_classes(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ValidationError("scores and labels differ in length");
  Counts c;
  for (int y : labels) (y == 1 ? c.positives : c.negatives)++;
  return c;
}

void require_both_classes(const Counts& c) {
  if (c.positives == 0 || c.negatives == 0) {
    throw ValidationError("metric undefined: labels must contain both classes");
  }
}

// Indices sorted by score, descending.
std::vector<std::size_t> descending(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

// Calls fn(score, group_pos, group_neg) for each tie group, highest first.
template <class Fn>
void for_each_group(std::span<const double> scores, std::span<const int> labels, Fn&& fn) {
  const auto order = descending(scores);
  std::size_t i = 0;
  while (i < order.size()) {
    const double s = scores[order[i]];
    std::size_t pos = 0;
    std::size_t neg = 0;
    while (i < order.size() && scores[order[i]] == s) {
      (labels[order[i]] == 1 ? pos : neg)++;
      ++i;
    }
    fn(s, pos, neg);
  }
}

}  // namespace

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels) {
  const Counts c = count_classes(scores, labels);
  require_both_classes(c);
  std::vector<RocPoint> roc{{0.0, 0.0}};
  std::size_t tp = 0;
  std::size_t fp = 0;
  for_each_group(scores, labels, [&](double, std::size_t pos, std::size_t neg) {
    tp += pos;
    fp += neg;
    roc.push_back({static_cast<double>(fp) / static_cast<double>(c.negatives),
                   static_cast<double>(tp) / static_cast<double>(c.positives)});
  });
  return roc;
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  const Counts c = count_classes(scores, labels);
  require_both_classes(c);
  // Twice the (pos > neg) + 0.5 (pos == neg) pair count, exact in integers.
  unsigned long long twice = 0;
  std::size_t neg_below = c.negatives;
  for_each_group(scores, labels, [&](double, std::size_t pos, std::size_t neg) {
    neg_below -= neg;
    twice += 2ULL * pos * neg_below + static_cast<unsigned long long>(pos) * neg;
  });
  return static_cast<double>(twice) /
         (2.0 * static_cast<double>(c.positives) * static_cast<double>(c.negatives));
}

OperatingPoint operating_point_at_fpr(std::span<const double> scores, std::span<const int> labels,
                                      double target) {
  const Counts c = count_classes(scores, labels);
  require_both_classes(c);
  OperatingPoint best;
  std::size_t tp = 0;
  std::size_t fp = 0;
  bool stop = false;
  for_each_group(scores, labels, [&](double s, std::size_t pos, std::size_t neg) {
    if (stop) return;
    const double fpr = static_cast<double>(fp + neg) / static_cast<double>(c.negatives);
    if (fpr > target + kFprSlack) {
      stop = true;
      return;
    }
    tp += pos;
    fp += neg;
    best.threshold = s;
    best.fpr = fpr;
    best.true_positives = tp;
    best.false_positives = fp;
  });
  best.recall = static_cast<double>(best.true_positives) / static_cast<double>(c.positives);
  const std::size_t fired = best.true_positives + best.false_positives;
  best.precision = fired == 0 ? 0.0 : static_cast<double>(best.true_positives) / fired;
  return best;
}

double recall_at_fpr(std::span<const double> scores, std::span<const int> labels, double target) {
  return operating_point_at_fpr(scores, labels, target).recall;
}

double precision_at_fpr(std::span<const double> scores, std::span<const int> labels,
                        double target) {
  return operating_point_at_fpr(scores, labels, target).precision;
}

LabelMetrics label_metrics(std::string label, std::span<const double> scores,
                           std::span<const int> labels, double fpr_target) {
  LabelMetrics m;
  m.label = std::move(label);
  m.fpr_target = fpr_target;
  const Counts c = count_classes(scores, labels);
  m.positives = c.positives;
  m.negatives = c.negatives;
  if (c.positives == 0 || c.negatives == 0) {
    m.single_class = true;
    return m;
  }
  m.roc = roc_curve(scores, labels);
  m.auc = auc(scores, labels);
  const OperatingPoint op = operating_point_at_fpr(scores, labels, fpr_target);
  m.recall_at_fpr = op.recall;
  m.precision_at_fpr = op.precision;
  m.threshold = op.threshold;
  return m;
}

std::vector<RocPoint> subsample_roc(const std::vector<RocPoint>& roc, std::size_t max_points) {
  if (roc.size() <= max_points || max_points < 2) return roc;
  std::vector<RocPoint> out;
  out.reserve(max_points);
  const double stride = static_cast<double>(roc.size() - 1) / static_cast<double>(max_points - 1);
  for (std::size_t k = 0; k < max_points; ++k) {
    const auto idx = static_cast<std::size_t>(std::llround(stride * static_cast<double>(k)));
    out.push_back(roc[std::min(idx, roc.size() - 1)]);
  }
  return out;
}

const LabelMetrics* MetricsReport::find_concept(std::string_view id) const {
  for (const auto& c : concepts) {
    if (c.label == id) return &c;
  }
  return nullptr;
}

namespace {

json label_json(const LabelMetrics& m, std::size_t max_roc_points) {
  json j{{"label", m.label},
         {"positives", m.positives},
         {"negatives", m.negatives},
         {"single_class", m.single_class},
         {"fpr_target", m.fpr_target}};
  if (!m.single_class) {
    json roc = json::array();
    for (const auto& p : subsample_roc(m.roc, max_roc_points)) roc.push_back({p.fpr, p.tpr});
    j["auc"] = m.auc;
    j["recall_at_fpr"] = m.recall_at_fpr;
    j["precision_at_fpr"] = m.precision_at_fpr;
    j["threshold"] = m.threshold ? json(*m.threshold) : json(nullptr);
    j["roc"] = std::move(roc);
  }
  return j;
}

}  // namespace

json MetricsReport::to_json(std::size_t max_roc_points) const {
  json concepts_json = json::array();
  for (const auto& c : concepts) concepts_json.push_back(label_json(c, max_roc_points));
  return {{"decision", label_json(decision, max_roc_points)},
          {"concepts", std::move(concepts_json)},
          {"mean_auc", mean_auc},
          {"mean_auc_labels", mean_auc_labels},
          {"excluded", excluded}};
}

}  // namespace joel
