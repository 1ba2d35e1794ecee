#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "joel/io_util.hpp"
#include "joel/matrix.hpp"
#include "joel/rng.hpp"
#include "joel/taxonomy.hpp"

namespace joel {

struct FeatureSchema {
  std::vector<std::string> numeric;
  std::vector<std::string> categorical;

  friend bool operator==(const FeatureSchema&, const FeatureSchema&) = default;
};

// One transaction. Feature vectors are aligned with the owning table's
// FeatureSchema.
struct RawEvent {
  std::string event_id;
  Timestamp timestamp = 0;
  int fraud_label = 0;
  std::vector<std::string> triggered_rules;
  std::vector<std::optional<double>> numeric;
  std::vector<std::optional<std::string>> categorical;

  friend bool operator==(const RawEvent&, const RawEvent&) = default;
};

// One byte per concept in taxonomy order; 1 = present.
using ConceptBits = std::vector<std::uint8_t>;

struct AnnotatedEvent : RawEvent {
  ConceptBits concepts;

  friend bool operator==(const AnnotatedEvent&, const AnnotatedEvent&) = default;
};

template <class Event>
struct EventTable {
  FeatureSchema schema;
  std::vector<Event> events;
  std::size_t duplicates_removed = 0;
};

using RawTable = EventTable<RawEvent>;
using AnnotatedTable = EventTable<AnnotatedEvent>;

// CSV with header `event_id,timestamp,label,rules[,concepts],num_<f>...,cat_<f>...`.
// Rows keep file order; repeated event ids keep the first row.
RawTable read_events(const std::filesystem::path& path);
RawTable parse_events(std::string_view csv);
AnnotatedTable read_annotated(const std::filesystem::path& path, const ConceptTaxonomy& tax);
AnnotatedTable parse_annotated(std::string_view csv, const ConceptTaxonomy& tax);

std::string format_events(const FeatureSchema& schema, std::span<const RawEvent> events);
std::string format_annotated(const FeatureSchema& schema, std::span<const AnnotatedEvent> events,
                             const ConceptTaxonomy& tax);
void write_events(const std::filesystem::path& path, const FeatureSchema& schema,
                  std::span<const RawEvent> events);
void write_annotated(const std::filesystem::path& path, const FeatureSchema& schema,
                     std::span<const AnnotatedEvent> events, const ConceptTaxonomy& tax);

// Reorders the feature columns of `table` to `schema`. Throws ValidationError
// when a column of `schema` is missing.
template <class Event>
void conform(EventTable<Event>& table, const FeatureSchema& schema);

// Split boundaries are half-open: [.., train_end) [train_end, val_end) ...
struct SplitSpec {
  Timestamp train_end = 0;
  Timestamp val_end = 0;
  Timestamp test_end = 0;
  Timestamp prod_end = 0;
  double undersample_keep_rate = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

template <class Event>
struct Splits {
  std::vector<Event> train;
  std::vector<Event> validation;
  std::vector<Event> test;
  std::vector<Event> production;
  std::size_t dropped = 0;
};

template <class Event>
Splits<Event> temporal_split(std::span<const Event> events, const SplitSpec& spec) {
  spec.validate();
  Splits<Event> out;
  for (const Event& e : events) {
    if (e.timestamp < spec.train_end) {
      out.train.push_back(e);
    } else if (e.timestamp < spec.val_end) {
      out.validation.push_back(e);
    } else if (e.timestamp < spec.test_end) {
      out.test.push_back(e);
    } else if (e.timestamp < spec.prod_end) {
      out.production.push_back(e);
    } else {
      ++out.dropped;
    }
  }
  return out;
}

// Boundaries at the given cumulative fractions of the sorted timestamps; the
// production window ends one second after the last event.
SplitSpec split_by_fraction(std::span<const Timestamp> timestamps, std::array<double, 3> cumulative,
                            double keep_rate, std::uint64_t seed);

// Keeps every positive and each negative independently with probability
// keep_rate.
template <class Event>
std::vector<Event> undersample_negatives(std::span<const Event> train, double keep_rate,
                                         std::uint64_t seed);

struct NumericStats {
  double impute_value = 0.0;  // train median
  double mean = 0.0;
  double stddev = 1.0;  // 0 marks a column constant in train
};

// Preprocessing fitted on the training split: median imputation with a
// missing indicator and z-scoring for numerics; top-K one-hot with "other"
// and "missing" buckets for categoricals.
class FeatureCodec {
 public:
  static constexpr double kMinStddev = 1e-12;

  FeatureCodec() = default;

  template <class Event>
  static FeatureCodec fit(const FeatureSchema& schema, std::span<const Event> train,
                          std::size_t top_k = 100);

  bool fitted() const { return fitted_; }
  const FeatureSchema& schema() const { return schema_; }
  std::size_t dimension() const { return dimension_; }
  const std::vector<NumericStats>& numeric_stats() const { return numeric_; }
  const std::vector<std::vector<std::string>>& vocabularies() const { return vocab_; }
  std::vector<std::string> feature_names() const;

  // Throws UsageError if unfitted, ValidationError on width mismatch.
  void encode_into(const RawEvent& event, std::span<double> x) const;
  std::vector<double> encode(const RawEvent& event) const;

  nlohmann::json to_json() const;
  static FeatureCodec from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static FeatureCodec load(const std::filesystem::path& path);

 private:
  static FeatureCodec fit_columns(const FeatureSchema& schema,
                                  const std::vector<std::vector<std::optional<double>>>& numeric,
                                  const std::vector<std::vector<std::optional<std::string>>>& cats,
                                  std::size_t top_k);
  void finalize();

  bool fitted_ = false;
  FeatureSchema schema_;
  std::vector<NumericStats> numeric_;
  std::vector<std::vector<std::string>> vocab_;
  std::size_t dimension_ = 0;
};

inline constexpr std::size_t kNumDecisions = 2;
inline constexpr std::size_t kFraudClass = 1;

struct EncodedInstance {
  std::vector<double> x;
  std::array<double, kNumDecisions> y{};
  std::vector<double> s;
};

EncodedInstance encode(const FeatureCodec& codec, const AnnotatedEvent& event);

// Row-aligned encoded dataset.
struct EncodedSet {
  Matrix x;
  std::vector<int> labels;
  Matrix concepts;  // multi-hot, n x |S|
  std::vector<std::string> event_ids;

  std::size_t size() const { return labels.size(); }
  Matrix decision_targets(std::span<const std::size_t> rows) const;
  Matrix decision_targets() const;
  std::size_t positives() const;
};

EncodedSet encode_all(const FeatureCodec& codec, std::span<const AnnotatedEvent> events);

struct BatchPlan {
  std::size_t batch_size = 4096;
  std::size_t min_positives_per_batch = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

// One epoch of row indices. Negatives are shuffled and partitioned into
// chunks of batch_size; positives are dealt round-robin from a shuffled pool,
// cycling (and repeating) when needed so every batch gets at least
// min_positives_per_batch. Throws ValidationError without positives.
std::vector<std::vector<std::size_t>> sample_batches(std::span<const int> labels,
                                                     const BatchPlan& plan);

}  // namespace joel
