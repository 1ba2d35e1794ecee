#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "joel/dataset.hpp"
#include "joel/human_loop.hpp"
#include "joel/model.hpp"
#include "joel/taxonomy.hpp"

namespace httplib {
class Server;
}

namespace joel {

struct ServiceConfig {
  double band_lo = 0.05;
  double band_hi = 0.95;
  Timestamp claim_ttl_secs = 15 * 60;
  std::string admin_token;  // empty disables the admin endpoint
  TuneConfig tune;
  // Unknown expert ids are registered on first contact (qualified, multiplier 1).
  bool open_registration = false;
};

enum class CaseStatus { pending, claimed, reviewed };

std::string_view to_string(CaseStatus s);

struct CaseRecord {
  std::string event_id;
  RawEvent raw;
  Prediction prediction;
  CaseStatus status = CaseStatus::pending;
  std::optional<std::string> claimed_by;
  std::optional<Timestamp> claim_expires_at;
};

struct Response {
  int status = 200;
  nlohmann::json body;
};

// Review queue and model owner behind the HTTP API. Every public method is
// thread-safe. Predictions are served from an immutable model snapshot that a
// committed tune replaces atomically.
class ReviewService {
 public:
  using Clock = std::function<Timestamp()>;

  ReviewService(ServiceConfig config, ConceptTaxonomy taxonomy, FeatureCodec codec,
                FeedbackStore& store, ExpertRegistry experts, Clock clock = {});

  // Throws ValidationError when the network's taxonomy or input width does not
  // match the service.
  void load_model(JoelNetwork net, nlohmann::json bootstrap_metrics = nlohmann::json::object());
  bool model_loaded() const;
  std::shared_ptr<const JoelNetwork> snapshot() const;

  // Scores the events and queues those whose fraud score lies in the review
  // band, in the given order. Returns the number queued. Requires a model.
  std::size_t enqueue(std::span<const RawEvent> events);

  // GET /api/cases/next
  Response next_case(const std::optional<std::string>& expert_id);
  // POST /api/cases/{id}/review
  Response review(const std::string& case_id, const std::optional<std::string>& expert_id,
                  const std::string& body);
  // GET /api/model, /api/taxonomy, /api/metrics
  Response model_info() const;
  Response taxonomy() const;
  Response metrics() const;
  // POST /api/model/tune
  Response force_tune(const std::optional<std::string>& admin_token);

  std::optional<CaseRecord> find_case(const std::string& id) const;

 private:
  struct ReviewedCase {
    std::set<std::size_t> fired;
    std::set<std::size_t> expert;
  };

  const ExpertProfile* resolve_expert(const std::string& id);
  void release_expired(Timestamp now);
  Response tune_locked(bool force);
  nlohmann::json case_json(const CaseRecord& c) const;

  ServiceConfig config_;
  ConceptTaxonomy taxonomy_;
  FeatureCodec codec_;
  FeedbackStore& store_;
  Clock clock_;

  mutable std::mutex model_mutex_;  // guards model_, bootstrap_metrics_
  std::shared_ptr<const JoelNetwork> model_;
  nlohmann::json bootstrap_metrics_;

  std::mutex tune_mutex_;  // single writer for model updates
  std::atomic<std::size_t> tunes_{0};

  mutable std::mutex queue_mutex_;  // guards everything below
  ExpertRegistry experts_;
  InstanceIndex instances_;
  std::vector<CaseRecord> cases_;  // arrival order
  std::unordered_map<std::string, std::size_t> case_index_;
  std::vector<ReviewedCase> reviewed_;
};

// Registers the JSON endpoints (plus permissive CORS) on `server`.
void bind_routes(httplib::Server& server, ReviewService& service);

}  // namespace joel
