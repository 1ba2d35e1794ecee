#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "joel/dataset.hpp"
#include "joel/model.hpp"
#include "joel/nn.hpp"
#include "joel/rng.hpp"
#include "joel/taxonomy.hpp"

namespace joel {

enum class Decision { approve, decline };  // decline = fraud

std::string_view to_string(Decision d);
Decision decision_from_string(std::string_view s);
inline int decision_label(Decision d) { return d == Decision::decline ? 1 : 0; }
inline Decision decision_of_label(int label) { return label == 1 ? Decision::decline : Decision::approve; }

struct FeedbackRecord {
  std::uint64_t seq = 0;
  std::string event_id;
  std::string expert_id;
  Decision decision = Decision::approve;
  std::vector<std::string> concepts;
  Timestamp created_at = 0;
  std::uint64_t model_version_seen = 0;

  nlohmann::json to_json() const;
  static FeedbackRecord from_json(const nlohmann::json& j);

  friend bool operator==(const FeedbackRecord&, const FeedbackRecord&) = default;
};

// Append-only feedback log. Each accepted record is written as one JSON line
// and fsync'ed before submit returns. Tuning consumption is logged as a
// separate marker line. Reopening replays the file: the highest seq per
// (event_id, expert_id) wins, and an unterminated last line left by a crash is
// discarded. Thread-safe.
class FeedbackStore {
 public:
  // In-memory store (nothing persisted).
  FeedbackStore() = default;
  // Opens or creates the log at `path` and replays it. Throws FormatError on
  // a corrupt complete line.
  explicit FeedbackStore(std::filesystem::path path);
  ~FeedbackStore();

  FeedbackStore(const FeedbackStore&) = delete;
  FeedbackStore& operator=(const FeedbackStore&) = delete;

  // Assigns the next seq, persists, and returns the seq. A record for an
  // existing (event_id, expert_id) replaces the earlier one.
  std::uint64_t submit(FeedbackRecord record);

  // Live records (replacements applied) in seq order.
  std::vector<FeedbackRecord> records() const;
  // Every accepted line in file order, including replaced ones.
  std::vector<FeedbackRecord> history() const;
  // Live records not yet consumed by a tune, oldest first.
  std::vector<FeedbackRecord> pending() const;

  bool is_consumed(std::uint64_t seq) const;
  // Persists a tuning marker. Throws UsageError if a seq is unknown or was
  // already consumed.
  void mark_consumed(const std::vector<std::uint64_t>& seqs, std::uint64_t model_version);

  std::size_t size() const;
  std::size_t replacements() const;
  std::size_t consumed_count() const;
  std::size_t tunes() const;
  std::uint64_t last_seq() const;
  const std::optional<std::filesystem::path>& path() const { return path_; }

 private:
  void apply(FeedbackRecord record);
  void append_line(const std::string& line);

  mutable std::mutex mutex_;
  std::optional<std::filesystem::path> path_;
  int fd_ = -1;
  std::vector<FeedbackRecord> history_;
  std::map<std::uint64_t, FeedbackRecord> live_;  // by seq
  std::map<std::pair<std::string, std::string>, std::uint64_t> by_key_;
  std::set<std::uint64_t> consumed_;
  std::size_t replacements_ = 0;
  std::size_t tunes_ = 0;
  std::uint64_t last_seq_ = 0;
};

struct ExpertProfile {
  std::string expert_id;
  double lr_multiplier = 1.0;
  std::optional<double> accuracy_estimate;
  bool qualified = false;
};

// qualified iff the estimate is known and >= min_accuracy; unknown estimates
// yield `unknown_qualifies`.
bool expert_gate(const ExpertProfile& profile, double min_accuracy, bool unknown_qualifies = false);

class ExpertRegistry {
 public:
  // Throws ValidationError on a duplicate id or a non-positive multiplier.
  void add(ExpertProfile profile);
  const ExpertProfile* find(std::string_view id) const;
  std::size_t size() const { return experts_.size(); }
  const std::map<std::string, ExpertProfile, std::less<>>& all() const { return experts_; }

  // File format: [{expert_id, lr_multiplier?, accuracy_estimate?}], gated
  // with min_accuracy.
  static ExpertRegistry from_json(const nlohmann::json& j, double min_accuracy);
  static ExpertRegistry load(const std::filesystem::path& path, double min_accuracy);

 private:
  std::map<std::string, ExpertProfile, std::less<>> experts_;
};

// Validates the record (registered expert, non-empty known concepts),
// normalises its concept list to taxonomy order and appends it.
std::uint64_t submit_feedback(FeedbackStore& store, FeedbackRecord record,
                              const ConceptTaxonomy& tax, const ExpertRegistry& experts);

// event id -> encoded feature row.
class InstanceIndex {
 public:
  void add(const std::string& event_id, std::vector<double> x);
  void add_all(const EncodedSet& set);
  const std::vector<double>* find(std::string_view event_id) const;
  std::size_t size() const { return rows_.size(); }

 private:
  std::unordered_map<std::string, std::vector<double>> rows_;
};

struct TuneConfig {
  std::size_t batch_size = 100;  // trigger size b
  double learning_rate = 0.05;
  nn::OptimizerKind optimizer = nn::OptimizerKind::sgd;
  std::size_t epochs_per_tune = 50;
  std::vector<std::size_t> frozen_layers;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TuneConfig from_json(const nlohmann::json& j);
};

struct TuneOutcome {
  bool tuned = false;
  std::optional<JoelNetwork> net;  // set iff tuned
  std::vector<std::uint64_t> consumed;
  std::vector<std::uint64_t> missing_instances;  // consumed without an encoded row
  std::map<std::string, std::size_t> per_expert;
};

// With at least b pending qualified records (or, when forced, at least one),
// fine-tunes a copy of `net` on the oldest min(pending, b) of them: grouped
// by expert id in ascending order, each group gets epochs_per_tune steps of
// the joint loss on the experts' decisions and concepts, with learning rate
// scaled by the expert's multiplier. Batch-norm and dropout run in inference
// mode. The copy's version is bumped once and the records are marked
// consumed.
TuneOutcome maybe_tune(const JoelNetwork& net, FeedbackStore& store, const TuneConfig& cfg,
                       const ExpertRegistry& experts, const InstanceIndex& instances,
                       bool force = false);

struct ExpertOpinion {
  Decision decision = Decision::approve;
  std::vector<std::size_t> concepts;  // taxonomy positions, non-empty
};

// Reproduces the ground truth, flipping the decision and each non-fallback
// concept independently with probability noise_rate. An empty result falls
// back to the concept matching the reported decision.
class SimulatedExpert {
 public:
  SimulatedExpert(double noise_rate, std::uint64_t seed);

  ExpertOpinion review(const AnnotatedEvent& truth, const ConceptTaxonomy& tax);
  double noise_rate() const { return noise_; }

 private:
  double noise_;
  Rng rng_;
};

// Share of truth events on which the expert's decision is correct.
double estimate_accuracy(SimulatedExpert& expert, std::span<const AnnotatedEvent> truth,
                         const ConceptTaxonomy& tax);

struct LoopEntry {
  std::string kind;  // prediction | feedback | tune | error
  std::string event_id;
  std::string expert_id;
  nlohmann::json detail;
};

struct LoopParticipant {
  ExpertProfile profile;
  SimulatedExpert expert;
};

struct LoopResult {
  JoelNetwork net;
  std::vector<LoopEntry> log;
  std::size_t tunes = 0;
};

// Main continuous loop over a stream of ground-truth events. Each event is
// predicted, reviewed by the next participant (round robin), stored and then
// may trigger a tune. Per-event failures are logged and skipped.
LoopResult human_teaching_loop(JoelNetwork net, std::span<const AnnotatedEvent> stream,
                               const FeatureCodec& codec, std::vector<LoopParticipant>& experts,
                               const TuneConfig& cfg, FeedbackStore& store,
                               Timestamp clock_start = 0);

nlohmann::json loop_log_json(const std::vector<LoopEntry>& log);

}  // namespace joel
