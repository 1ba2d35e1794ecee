#include "joel/human_loop.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>

#include "joel/error.hpp"
#include "joel/io_util.hpp"

namespace joel {

using nlohmann::json;

std::string_view to_string(Decision d) { return d == Decision::decline ? "decline" : "approve"; }

Decision decision_from_string(std::string_view s) {
  if (s == "approve") return Decision::approve;
  if (s == "decline") return Decision::decline;
  throw ValidationError("decision must be approve or decline, got \"" + std::string(s) + "\"");
}

json FeedbackRecord::to_json() const {
  return {{"kind", "feedback"},
          {"seq", seq},
          {"event_id", event_id},
          {"expert_id", expert_id},
          {"decision", to_string(decision)},
          {"concepts", concepts},
          {"created_at", format_timestamp(created_at)},
          {"model_version_seen", model_version_seen}};
}

FeedbackRecord FeedbackRecord::from_json(const json& j) {
  FeedbackRecord r;
  r.seq = j.at("seq").get<std::uint64_t>();
  r.event_id = j.at("event_id").get<std::string>();
  r.expert_id = j.at("expert_id").get<std::string>();
  r.decision = decision_from_string(j.at("decision").get<std::string>());
  r.concepts = j.at("concepts").get<std::vector<std::string>>();
  r.created_at = parse_timestamp(j.at("created_at").get<std::string>());
  r.model_version_seen = j.value("model_version_seen", std::uint64_t{0});
  return r;
}

// ---------------------------------------------------------------- store

FeedbackStore::FeedbackStore(std::filesystem::path path) : path_(std::move(path)) {
  std::string text;
  if (std::filesystem::exists(*path_)) text = read_file(*path_);
  const std::size_t complete = text.rfind('\n') == std::string::npos ? 0 : text.rfind('\n') + 1;
  if (complete < text.size()) {
    // A crash mid-append leaves an unterminated tail; drop it.
    std::filesystem::resize_file(*path_, complete);
    text.resize(complete);
  }
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t end = text.find('\n', pos);
    const std::string_view line(text.data() + pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      if (j.value("kind", std::string{"feedback"}) == "tune") {
        for (const auto& s : j.at("seqs")) consumed_.insert(s.get<std::uint64_t>());
        ++tunes_;
      } else {
        apply(FeedbackRecord::from_json(j));
      }
    } catch (const std::exception& e) {
      throw FormatError(path_->string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  fd_ = ::open(path_->c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
  if (fd_ < 0) {
    throw FormatError("cannot open " + path_->string() + ": " + std::strerror(errno));
  }
}

FeedbackStore::~FeedbackStore() {
  if (fd_ >= 0) ::close(fd_);
}

void FeedbackStore::append_line(const std::string& line) {
  if (fd_ < 0) return;
  std::size_t done = 0;
  while (done < line.size()) {
    const ssize_t n = ::write(fd_, line.data() + done, line.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw FormatError("feedback append failed: " + std::string(std::strerror(errno)));
    }
    done += static_cast<std::size_t>(n);
  }
  if (::fsync(fd_) != 0) {
    throw FormatError("feedback fsync failed: " + std::string(std::strerror(errno)));
  }
}

void FeedbackStore::apply(FeedbackRecord record) {
  last_seq_ = std::max(last_seq_, record.seq);
  const auto key = std::make_pair(record.event_id, record.expert_id);
  if (auto it = by_key_.find(key); it != by_key_.end()) {
    if (it->second > record.seq) {
      history_.push_back(std::move(record));
      return;
    }
    live_.erase(it->second);
    ++replacements_;
  }
  by_key_[key] = record.seq;
  live_[record.seq] = record;
  history_.push_back(std::move(record));
}

std::uint64_t FeedbackStore::submit(FeedbackRecord record) {
  std::lock_guard lock(mutex_);
  record.seq = last_seq_ + 1;
  append_line(record.to_json().dump() + "\n");
  const std::uint64_t seq = record.seq;
  apply(std::move(record));
  return seq;
}

std::vector<FeedbackRecord> FeedbackStore::records() const {
  std::lock_guard lock(mutex_);
  std::vector<FeedbackRecord> out;
  for (const auto& [seq, r] : live_) out.push_back(r);
  return out;
}

std::vector<FeedbackRecord> FeedbackStore::history() const {
  std::lock_guard lock(mutex_);
  return history_;
}

std::vector<FeedbackRecord> FeedbackStore::pending() const {
  std::lock_guard lock(mutex_);
  std::vector<FeedbackRecord> out;
  for (const auto& [seq, r] : live_) {
    if (!consumed_.contains(seq)) out.push_back(r);
  }
  return out;
}

bool FeedbackStore::is_consumed(std::uint64_t seq) const {
  std::lock_guard lock(mutex_);
  return consumed_.contains(seq);
}

void FeedbackStore::mark_consumed(const std::vector<std::uint64_t>& seqs,
                                  std::uint64_t model_version) {
  std::lock_guard lock(mutex_);
  for (std::uint64_t s : seqs) {
    if (!live_.contains(s)) throw UsageError("cannot consume unknown feedback seq " + std::to_string(s));
    if (consumed_.contains(s)) throw UsageError("feedback seq " + std::to_string(s) + " already consumed");
  }
  const json marker{{"kind", "tune"}, {"seqs", seqs}, {"model_version", model_version}};
  append_line(marker.dump() + "\n");
  consumed_.insert(seqs.begin(), seqs.end());
  ++tunes_;
}

std::size_t FeedbackStore::size() const {
  std::lock_guard lock(mutex_);
  return live_.size();
}

std::size_t FeedbackStore::replacements() const {
  std::lock_guard lock(mutex_);
  return replacements_;
}

std::size_t FeedbackStore::consumed_count() const {
  std::lock_guard lock(mutex_);
  return consumed_.size();
}

std::size_t FeedbackStore::tunes() const {
  std::lock_guard lock(mutex_);
  return tunes_;
}

std::uint64_t FeedbackStore::last_seq() const {
  std::lock_guard lock(mutex_);
  return last_seq_;
}

// ---------------------------------------------------------------- experts

bool expert_gate(const ExpertProfile& profile, double min_accuracy, bool unknown_qualifies) {
  if (!profile.accuracy_estimate) return unknown_qualifies;
  return *profile.accuracy_estimate >= min_accuracy;
}

void ExpertRegistry::add(ExpertProfile profile) {
  if (profile.expert_id.empty()) throw ValidationError("expert id must be non-empty");
  if (!(profile.lr_multiplier > 0.0)) {
    throw ValidationError("expert " + profile.expert_id + ": lr_multiplier must be positive");
  }
  const std::string id = profile.expert_id;
  if (!experts_.emplace(id, std::move(profile)).second) {
    throw ValidationError("duplicate expert id \"" + id + "\"");
  }
}

const ExpertProfile* ExpertRegistry::find(std::string_view id) const {
  const auto it = experts_.find(id);
  return it == experts_.end() ? nullptr : &it->second;
}

ExpertRegistry ExpertRegistry::from_json(const json& j, double min_accuracy) {
  if (!j.is_array()) throw FormatError("experts: expected a JSON array");
  ExpertRegistry reg;
  for (const json& e : j) {
    ExpertProfile p;
    p.expert_id = e.at("expert_id").get<std::string>();
    p.lr_multiplier = e.value("lr_multiplier", 1.0);
    if (e.contains("accuracy_estimate") && !e.at("accuracy_estimate").is_null()) {
      p.accuracy_estimate = e.at("accuracy_estimate").get<double>();
    }
    p.qualified = expert_gate(p, min_accuracy);
    reg.add(std::move(p));
  }
  return reg;
}

ExpertRegistry ExpertRegistry::load(const std::filesystem::path& path, double min_accuracy) {
  try {
    return from_json(json::parse(read_file(path)), min_accuracy);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::uint64_t submit_feedback(FeedbackStore& store, FeedbackRecord record,
                              const ConceptTaxonomy& tax, const ExpertRegistry& experts) {
  if (experts.find(record.expert_id) == nullptr) {
    throw ValidationError("unknown expert \"" + record.expert_id + "\"");
  }
  if (record.event_id.empty()) throw ValidationError("feedback needs an event id");
  if (record.concepts.empty()) throw ValidationError("feedback needs at least one concept");
  std::set<std::size_t> positions;
  for (const auto& id : record.concepts) positions.insert(tax.index_of(id));
  record.concepts.clear();
  for (std::size_t p : positions) record.concepts.push_back(tax.at(p).id);
  return store.submit(std::move(record));
}

void InstanceIndex::add(const std::string& event_id, std::vector<double> x) {
  rows_[event_id] = std::move(x);
}

void InstanceIndex::add_all(const EncodedSet& set) {
  for (std::size_t r = 0; r < set.size(); ++r) {
    const auto row = set.x.row(r);
    add(set.event_ids[r], std::vector<double>(row.begin(), row.end()));
  }
}

const std::vector<double>* InstanceIndex::find(std::string_view event_id) const {
  const auto it = rows_.find(std::string(event_id));
  return it == rows_.end() ? nullptr : &it->second;
}

// ---------------------------------------------------------------- tuning

void TuneConfig::validate() const {
  if (batch_size < 1) throw ValidationError("tuning batch size must be >= 1");
  if (!(learning_rate > 0.0)) throw ValidationError("tuning learning rate must be positive");
  if (epochs_per_tune < 1) throw ValidationError("epochs_per_tune must be >= 1");
}

json TuneConfig::to_json() const {
  return {{"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"optimizer", nn::to_string(optimizer)},
          {"epochs_per_tune", epochs_per_tune},
          {"frozen_layers", frozen_layers},
          {"seed", seed}};
}

TuneConfig TuneConfig::from_json(const json& j) {
  TuneConfig c;
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  if (j.contains("optimizer")) c.optimizer = nn::optimizer_from_string(j.at("optimizer").get<std::string>());
  c.epochs_per_tune = j.value("epochs_per_tune", c.epochs_per_tune);
  c.frozen_layers = j.value("frozen_layers", c.frozen_layers);
  c.seed = j.value("seed", c.seed);
  return c;
}

TuneOutcome maybe_tune(const JoelNetwork& net, FeedbackStore& store, const TuneConfig& cfg,
                       const ExpertRegistry& experts, const InstanceIndex& instances, bool force) {
  cfg.validate();
  TuneOutcome out;
  std::vector<FeedbackRecord> batch;
  for (auto& r : store.pending()) {
    const ExpertProfile* p = experts.find(r.expert_id);
    if (p == nullptr || !p->qualified) continue;
    batch.push_back(std::move(r));
    if (batch.size() == cfg.batch_size) break;
  }
  if (batch.empty() || (!force && batch.size() < cfg.batch_size)) return out;

  std::map<std::string, std::vector<const FeedbackRecord*>> groups;
  for (const auto& r : batch) {
    out.consumed.push_back(r.seq);
    if (instances.find(r.event_id) == nullptr) {
      out.missing_instances.push_back(r.seq);
      continue;
    }
    groups[r.expert_id].push_back(&r);
  }

  JoelNetwork tuned = net;
  std::vector<std::size_t> newly_frozen;
  for (std::size_t i : cfg.frozen_layers) {
    if (i >= tuned.layers.size()) throw ValidationError("frozen layer index out of range");
    if (!tuned.layers[i].frozen) newly_frozen.push_back(i);
  }
  nn::set_frozen(tuned.layers, newly_frozen, true);

  const std::size_t dim = net.arch.input_dim;
  const std::size_t k = net.concept_count();
  nn::OptimizerState opt = nn::OptimizerState::make(cfg.optimizer, cfg.learning_rate);
  for (const auto& [expert_id, records] : groups) {
    const double scale = experts.find(expert_id)->lr_multiplier;
    Matrix x(records.size(), dim);
    Matrix y(records.size(), kNumDecisions);
    Matrix s(records.size(), k);
    for (std::size_t r = 0; r < records.size(); ++r) {
      const auto* row = instances.find(records[r]->event_id);
      if (row->size() != dim) throw ValidationError("encoded instance width mismatch");
      std::copy(row->begin(), row->end(), x.row(r).begin());
      y(r, static_cast<std::size_t>(decision_label(records[r]->decision))) = 1.0;
      for (const auto& c : records[r]->concepts) s(r, net.taxonomy.index_of(c)) = 1.0;
    }
    for (std::size_t e = 0; e < cfg.epochs_per_tune; ++e) {
      const auto trace = nn::forward(tuned.layers, x, nn::Mode::tune);
      const JointGradients g = joint_backward(tuned, trace, y, s, tuned.lambda);
      nn::step(tuned.layers, g.grads, opt, scale);
    }
    out.per_expert[expert_id] = records.size();
  }
  nn::set_frozen(tuned.layers, newly_frozen, false);
  ++tuned.version;
  store.mark_consumed(out.consumed, tuned.version);
  out.tuned = true;
  out.net = std::move(tuned);
  return out;
}

// ---------------------------------------------------------------- simulation

SimulatedExpert::SimulatedExpert(double noise_rate, std::uint64_t seed)
    : noise_(noise_rate), rng_(seed) {
  if (!(noise_rate >= 0.0 && noise_rate <= 1.0)) {
    throw ValidationError("noise rate must be in [0, 1]");
  }
}

ExpertOpinion SimulatedExpert::review(const AnnotatedEvent& truth, const ConceptTaxonomy& tax) {
  ExpertOpinion op;
  const bool flip = rng_.bernoulli(noise_);
  op.decision = decision_of_label(flip ? 1 - truth.fraud_label : truth.fraud_label);
  for (std::size_t c = 0; c < tax.size(); ++c) {
    if (tax.at(c).is_fallback()) continue;
    const bool present = truth.concepts.at(c) != 0;
    if (present != rng_.bernoulli(noise_)) op.concepts.push_back(c);
  }
  if (op.concepts.empty()) op.concepts.push_back(tax.fallback_for(decision_label(op.decision)));
  return op;
}

double estimate_accuracy(SimulatedExpert& expert, std::span<const AnnotatedEvent> truth,
                         const ConceptTaxonomy& tax) {
  if (truth.empty()) throw ValidationError("accuracy estimate needs at least one event");
  std::size_t correct = 0;
  for (const auto& e : truth) {
    correct += decision_label(expert.review(e, tax).decision) == e.fraud_label;
  }
  return static_cast<double>(correct) / static_cast<double>(truth.size());
}

LoopResult human_teaching_loop(JoelNetwork net, std::span<const AnnotatedEvent> stream,
                               const FeatureCodec& codec, std::vector<LoopParticipant>& experts,
                               const TuneConfig& cfg, FeedbackStore& store,
                               Timestamp clock_start) {
  cfg.validate();
  if (!stream.empty() && experts.empty()) throw ValidationError("the loop needs at least one expert");
  ExpertRegistry registry;
  for (const auto& p : experts) registry.add(p.profile);
  InstanceIndex index;
  LoopResult result;
  const ConceptTaxonomy& tax = net.taxonomy;

  for (std::size_t i = 0; i < stream.size(); ++i) {
    const AnnotatedEvent& ev = stream[i];
    LoopParticipant& who = experts[i % experts.size()];
    try {
      std::vector<double> x = codec.encode(ev);
      const Prediction pred = predict(net, x);
      index.add(ev.event_id, std::move(x));
      json fired = json::array();
      for (std::size_t c : pred.concepts_fired) fired.push_back(tax.at(c).id);
      result.log.push_back({"prediction", ev.event_id, "",
                            {{"fraud_score", pred.fraud_score},
                             {"concepts_fired", fired},
                             {"model_version", pred.model_version}}});

      const ExpertOpinion op = who.expert.review(ev, tax);
      FeedbackRecord rec;
      rec.event_id = ev.event_id;
      rec.expert_id = who.profile.expert_id;
      rec.decision = op.decision;
      for (std::size_t c : op.concepts) rec.concepts.push_back(tax.at(c).id);
      rec.created_at = clock_start + static_cast<Timestamp>(i);
      rec.model_version_seen = net.version;
      const std::uint64_t seq = submit_feedback(store, rec, tax, registry);
      result.log.push_back({"feedback", ev.event_id, rec.expert_id,
                            {{"seq", seq},
                             {"decision", to_string(rec.decision)},
                             {"concepts", rec.concepts}}});

      TuneOutcome t = maybe_tune(net, store, cfg, registry, index);
      if (t.tuned) {
        const std::uint64_t before = net.version;
        net = std::move(*t.net);
        ++result.tunes;
        result.log.push_back({"tune", ev.event_id, "",
                              {{"from_version", before},
                               {"to_version", net.version},
                               {"records", t.consumed.size()}}});
      }
    } catch (const std::exception& e) {
      result.log.push_back({"error", ev.event_id, who.profile.expert_id, {{"message", e.what()}}});
    }
  }
  result.net = std::move(net);
  return result;
}

json loop_log_json(const std::vector<LoopEntry>& log) {
  json out = json::array();
  for (const auto& e : log) {
    json j{{"kind", e.kind}, {"event_id", e.event_id}};
    if (!e.expert_id.empty()) j["expert_id"] = e.expert_id;
    j["detail"] = e.detail;
    out.push_back(std::move(j));
  }
  return out;
}

}  // namespace joel
