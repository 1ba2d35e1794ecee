#include "joel/review_service.hpp"

#include <algorithm>
#include <chrono>

#include <httplib.h>

#include "joel/error.hpp"
#include "joel/io_util.hpp"

namespace joel {

using nlohmann::json;

std::string_view to_string(CaseStatus s) {
  switch (s) {
    case CaseStatus::pending:
      return "pending";
    case CaseStatus::claimed:
      return "claimed";
    case CaseStatus::reviewed:
      return "reviewed";
  }
  return "pending";
}

namespace {

Response error(int status, std::string message) {
  return {status, {{"error", std::move(message)}}};
}

Timestamp system_now() {
  return std::chrono::duration_cast<std::chrono::seconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

}  // namespace

ReviewService::ReviewService(ServiceConfig config, ConceptTaxonomy taxonomy, FeatureCodec codec,
                             FeedbackStore& store, ExpertRegistry experts, Clock clock)
    : config_(std::move(config)),
      taxonomy_(std::move(taxonomy)),
      codec_(std::move(codec)),
      store_(store),
      clock_(clock ? std::move(clock) : Clock(system_now)),
      experts_(std::move(experts)) {
  if (!(config_.band_lo <= config_.band_hi)) throw ValidationError("review band is empty");
  if (config_.claim_ttl_secs <= 0) throw ValidationError("claim TTL must be positive");
  config_.tune.validate();
  if (!codec_.fitted()) throw ValidationError("review service needs a fitted codec");
}

void ReviewService::load_model(JoelNetwork net, json bootstrap_metrics) {
  net.validate();
  if (net.taxonomy.sha256() != taxonomy_.sha256()) {
    throw ValidationError("model taxonomy does not match the service taxonomy");
  }
  if (net.arch.input_dim != codec_.dimension()) {
    throw ValidationError("model input width does not match the codec");
  }
  std::lock_guard lock(model_mutex_);
  model_ = std::make_shared<const JoelNetwork>(std::move(net));
  bootstrap_metrics_ = std::move(bootstrap_metrics);
}

bool ReviewService::model_loaded() const { return snapshot() != nullptr; }

std::shared_ptr<const JoelNetwork> ReviewService::snapshot() const {
  std::lock_guard lock(model_mutex_);
  return model_;
}

std::size_t ReviewService::enqueue(std::span<const RawEvent> events) {
  const auto net = snapshot();
  if (!net) throw UsageError("load a model before queueing events");
  std::set<std::string> reviewed_before;
  for (const auto& r : store_.records()) reviewed_before.insert(r.event_id);

  std::size_t queued = 0;
  std::lock_guard lock(queue_mutex_);
  for (const RawEvent& e : events) {
    if (case_index_.contains(e.event_id) || reviewed_before.contains(e.event_id)) continue;
    std::vector<double> x = codec_.encode(e);
    Prediction p = predict(*net, x);
    if (p.fraud_score < config_.band_lo || p.fraud_score > config_.band_hi) continue;
    instances_.add(e.event_id, std::move(x));
    case_index_[e.event_id] = cases_.size();
    cases_.push_back({e.event_id, e, std::move(p), CaseStatus::pending, std::nullopt, std::nullopt});
    ++queued;
  }
  return queued;
}

const ExpertProfile* ReviewService::resolve_expert(const std::string& id) {
  if (const ExpertProfile* p = experts_.find(id)) return p;
  if (!config_.open_registration || id.empty()) return nullptr;
  experts_.add({id, 1.0, std::nullopt, true});
  return experts_.find(id);
}

void ReviewService::release_expired(Timestamp now) {
  for (CaseRecord& c : cases_) {
    if (c.status == CaseStatus::claimed && c.claim_expires_at && *c.claim_expires_at <= now) {
      c.status = CaseStatus::pending;
      c.claimed_by.reset();
      c.claim_expires_at.reset();
    }
  }
}

json ReviewService::case_json(const CaseRecord& c) const {
  const Prediction& p = c.prediction;
  std::vector<std::size_t> order(p.concept_scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return p.concept_scores[a] > p.concept_scores[b];
  });
  json scores = json::array();
  for (std::size_t i : order) {
    scores.push_back({{"id", taxonomy_.at(i).id},
                      {"display_name", taxonomy_.at(i).display_name},
                      {"score", p.concept_scores[i]},
                      {"fired", p.concepts_fired.contains(i)}});
  }
  json fired = json::array();
  for (std::size_t i : p.concepts_fired) fired.push_back(taxonomy_.at(i).id);

  json numeric = json::object();
  for (std::size_t i = 0; i < codec_.schema().numeric.size() && i < c.raw.numeric.size(); ++i) {
    const auto& v = c.raw.numeric[i];
    numeric[codec_.schema().numeric[i]] = v ? json(*v) : json(nullptr);
  }
  json categorical = json::object();
  for (std::size_t i = 0; i < codec_.schema().categorical.size() && i < c.raw.categorical.size(); ++i) {
    const auto& v = c.raw.categorical[i];
    categorical[codec_.schema().categorical[i]] = v ? json(*v) : json(nullptr);
  }
  json out{{"event_id", c.event_id},
           {"status", to_string(c.status)},
           {"event",
            {{"timestamp", format_timestamp(c.raw.timestamp)},
             {"triggered_rules", c.raw.triggered_rules},
             {"numeric", numeric},
             {"categorical", categorical}}},
           {"fraud_score", p.fraud_score},
           {"concept_scores", scores},
           {"concepts_fired", fired},
           {"model_version", p.model_version}};
  if (c.claimed_by) out["claimed_by"] = *c.claimed_by;
  if (c.claim_expires_at) out["claim_expires_at"] = format_timestamp(*c.claim_expires_at);
  return out;
}

Response ReviewService::next_case(const std::optional<std::string>& expert_id) {
  const auto net = snapshot();
  if (!net) return error(503, "model not loaded");
  std::lock_guard lock(queue_mutex_);
  if (!expert_id || resolve_expert(*expert_id) == nullptr) return error(401, "unknown expert");
  const Timestamp now = clock_();
  release_expired(now);
  for (CaseRecord& c : cases_) {
    if (c.status != CaseStatus::pending) continue;
    c.status = CaseStatus::claimed;
    c.claimed_by = *expert_id;
    c.claim_expires_at = now + config_.claim_ttl_secs;
    // Explanations come from the snapshot current at claim time.
    c.prediction = predict(*net, *instances_.find(c.event_id));
    return {200, case_json(c)};
  }
  return {204, nullptr};
}

Response ReviewService::review(const std::string& case_id,
                               const std::optional<std::string>& expert_id,
                               const std::string& body) {
  if (!snapshot()) return error(503, "model not loaded");
  FeedbackRecord rec;
  {
    json j;
    try {
      j = json::parse(body);
    } catch (const json::parse_error&) {
      return error(422, "body must be JSON");
    }
    if (!j.is_object() || !j.contains("decision") || !j.contains("concepts") ||
        !j.at("decision").is_string() || !j.at("concepts").is_array()) {
      return error(422, "body must be {decision, concepts[]}");
    }
    try {
      rec.decision = decision_from_string(j.at("decision").get<std::string>());
    } catch (const ValidationError& e) {
      return error(422, e.what());
    }
    for (const json& c : j.at("concepts")) {
      if (!c.is_string()) return error(422, "concept ids must be strings");
      if (!taxonomy_.find(c.get<std::string>())) {
        return error(422, "unknown concept \"" + c.get<std::string>() + "\"");
      }
      rec.concepts.push_back(c.get<std::string>());
    }
    if (rec.concepts.empty()) return error(422, "at least one concept is required");
  }

  std::uint64_t seq = 0;
  std::uint64_t version_seen = 0;
  {
    std::lock_guard lock(queue_mutex_);
    if (!expert_id || resolve_expert(*expert_id) == nullptr) return error(401, "unknown expert");
    const auto it = case_index_.find(case_id);
    if (it == case_index_.end()) return error(404, "unknown case");
    CaseRecord& c = cases_[it->second];
    release_expired(clock_());
    if (c.status != CaseStatus::claimed || c.claimed_by != *expert_id) {
      return error(409, "case is not claimed by this expert");
    }
    rec.event_id = case_id;
    rec.expert_id = *expert_id;
    rec.created_at = clock_();
    rec.model_version_seen = version_seen = c.prediction.model_version;
    try {
      seq = submit_feedback(store_, rec, taxonomy_, experts_);
    } catch (const ValidationError& e) {
      return error(422, e.what());
    }
    c.status = CaseStatus::reviewed;
    c.claim_expires_at.reset();
    ReviewedCase rc;
    rc.fired = c.prediction.concepts_fired;
    for (const auto& id : rec.concepts) rc.expert.insert(taxonomy_.index_of(id));
    reviewed_.push_back(std::move(rc));
  }

  std::lock_guard tune_lock(tune_mutex_);
  const Response t = tune_locked(false);
  const auto net = snapshot();
  return {200,
          {{"seq", seq},
           {"model_version", net->version},
           {"model_version_seen", version_seen},
           {"tuned", t.body.value("tuned", false)}}};
}

Response ReviewService::tune_locked(bool force) {
  const auto net = snapshot();
  ExpertRegistry experts;
  InstanceIndex rows;
  {
    std::lock_guard lock(queue_mutex_);
    experts = experts_;
    for (const auto& r : store_.pending()) {
      if (const auto* x = instances_.find(r.event_id)) rows.add(r.event_id, *x);
    }
  }
  TuneOutcome out = maybe_tune(*net, store_, config_.tune, experts, rows, force);
  json body{{"tuned", out.tuned},
            {"version_before", net->version},
            {"consumed", out.consumed.size()}};
  if (out.tuned) {
    body["version_after"] = out.net->version;
    {
      std::lock_guard lock(model_mutex_);
      model_ = std::make_shared<const JoelNetwork>(std::move(*out.net));
    }
    ++tunes_;
  } else {
    body["version_after"] = net->version;
  }
  body["version_delta"] = body["version_after"].get<std::uint64_t>() - net->version;
  return {200, body};
}

Response ReviewService::force_tune(const std::optional<std::string>& admin_token) {
  if (config_.admin_token.empty() || !admin_token || *admin_token != config_.admin_token) {
    return error(403, "admin token required");
  }
  if (!snapshot()) return error(503, "model not loaded");
  std::lock_guard tune_lock(tune_mutex_);
  return tune_locked(true);
}

Response ReviewService::model_info() const {
  const auto net = snapshot();
  if (!net) return error(503, "model not loaded");
  json thresholds = json::object();
  for (std::size_t c = 0; c < net->concept_count(); ++c) {
    thresholds[net->taxonomy.at(c).id] = net->concept_thresholds[c];
  }
  json layers = json::array();
  for (const auto& l : net->layers) {
    layers.push_back({{"in", l.in_dim()},
                      {"out", l.out_dim()},
                      {"activation", nn::to_string(l.activation)},
                      {"batch_norm", l.bn.has_value()},
                      {"dropout", l.dropout_rate}});
  }
  std::lock_guard lock(model_mutex_);
  return {200,
          {{"version", net->version},
           {"arch",
            {{"trunk_widths", net->arch.trunk_widths},
             {"input_dim", net->arch.input_dim},
             {"concepts", net->concept_count()},
             {"batch_norm", net->arch.batch_norm},
             {"in_paper_grid", net->arch.in_paper_grid()},
             {"layers", layers}}},
           {"thresholds", {{"concepts", thresholds}, {"decision", net->decision_threshold}}},
           {"lambda", net->lambda},
           {"bootstrap_metrics", bootstrap_metrics_}}};
}

Response ReviewService::taxonomy() const {
  if (!snapshot()) return error(503, "model not loaded");
  return {200, taxonomy_.to_json()};
}

Response ReviewService::metrics() const {
  const auto net = snapshot();
  if (!net) return error(503, "model not loaded");
  std::lock_guard lock(queue_mutex_);
  const Timestamp now = clock_();
  std::size_t pending = 0;
  std::size_t claimed = 0;
  std::size_t reviewed = 0;
  for (const auto& c : cases_) {
    const bool expired = c.status == CaseStatus::claimed && c.claim_expires_at &&
                         *c.claim_expires_at <= now;
    if (c.status == CaseStatus::pending || expired) {
      ++pending;
    } else if (c.status == CaseStatus::claimed) {
      ++claimed;
    } else {
      ++reviewed;
    }
  }
  json agreement = json::object();
  if (!reviewed_.empty()) {
    double jaccard = 0.0;
    std::vector<std::size_t> both(taxonomy_.size(), 0);
    std::vector<std::size_t> either(taxonomy_.size(), 0);
    for (const auto& rc : reviewed_) {
      std::size_t inter = 0;
      std::set<std::size_t> uni = rc.fired;
      uni.insert(rc.expert.begin(), rc.expert.end());
      for (std::size_t c : uni) {
        const bool in_both = rc.fired.contains(c) && rc.expert.contains(c);
        inter += in_both;
        both[c] += in_both;
        ++either[c];
      }
      jaccard += uni.empty() ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni.size());
    }
    json per = json::object();
    for (std::size_t c = 0; c < taxonomy_.size(); ++c) {
      if (either[c] == 0) continue;
      per[taxonomy_.at(c).id] = {{"cases", either[c]},
                                 {"agreement", static_cast<double>(both[c]) / static_cast<double>(either[c])}};
    }
    agreement = {{"jaccard_mean", jaccard / static_cast<double>(reviewed_.size())},
                 {"cases", reviewed_.size()},
                 {"per_concept", per}};
  }
  return {200,
          {{"pending", pending},
           {"claimed", claimed},
           {"reviewed", reviewed},
           {"tunes", tunes_.load()},
           {"feedback_records", store_.size()},
           {"pending_feedback", store_.pending().size()},
           {"model_version", net->version},
           {"agreement", agreement}}};
}

std::optional<CaseRecord> ReviewService::find_case(const std::string& id) const {
  std::lock_guard lock(queue_mutex_);
  const auto it = case_index_.find(id);
  if (it == case_index_.end()) return std::nullopt;
  return cases_[it->second];
}

namespace {

std::optional<std::string> header(const httplib::Request& req, const char* name) {
  if (!req.has_header(name)) return std::nullopt;
  return req.get_header_value(name);
}

void send(httplib::Response& res, const Response& r) {
  res.status = r.status;
  if (r.status != 204) res.set_content(r.body.dump(), "application/json");
}

}  // namespace

void bind_routes(httplib::Server& server, ReviewService& service) {
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Headers",
                               "Content-Type, X-Expert-Id, X-Admin-Token"},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
  server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.status = 204;
  });
  server.Get("/api/cases/next", [&](const httplib::Request& req, httplib::Response& res) {
    send(res, service.next_case(header(req, "X-Expert-Id")));
  });
  server.Post(R"(/api/cases/([^/]+)/review)",
              [&](const httplib::Request& req, httplib::Response& res) {
                send(res, service.review(req.matches[1], header(req, "X-Expert-Id"), req.body));
              });
  server.Get("/api/model", [&](const httplib::Request&, httplib::Response& res) {
    send(res, service.model_info());
  });
  server.Post("/api/model/tune", [&](const httplib::Request& req, httplib::Response& res) {
    send(res, service.force_tune(header(req, "X-Admin-Token")));
  });
  server.Get("/api/taxonomy", [&](const httplib::Request&, httplib::Response& res) {
    send(res, service.taxonomy());
  });
  server.Get("/api/metrics", [&](const httplib::Request&, httplib::Response& res) {
    send(res, service.metrics());
  });
  server.set_exception_handler([](const httplib::Request&, httplib::Response& res,
                                  std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    res.status = 500;
    res.set_content(json{{"error", what}}.dump(), "application/json");
  });
}

}  // namespace joel
