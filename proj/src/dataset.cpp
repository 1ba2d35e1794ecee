#include "joel/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "joel/error.hpp"

namespace joel {

using nlohmann::json;

namespace {

// Minimal RFC 4180 reader: quoted fields may hold separators, quotes ("")
// and newlines.
class CsvReader {
 public:
  explicit CsvReader(std::string_view text) : text_(text) {}

  // Returns false at end of input. `line` is the 1-based line the record
  // started on.
  bool next(std::vector<std::string>& fields, std::size_t& line) {
    fields.clear();
    if (pos_ >= text_.size()) return false;
    line = line_;
    std::string field;
    bool quoted = false;
    bool field_started = false;
    while (pos_ < text_.size()) {
      const char c = text_[pos_++];
      if (quoted) {
        if (c == '"') {
          if (pos_ < text_.size() && text_[pos_] == '"') {
            field.push_back('"');
            ++pos_;
          } else {
            quoted = false;
          }
        } else {
          if (c == '\n') ++line_;
          field.push_back(c);
        }
        continue;
      }
      if (c == '"' && !field_started) {
        quoted = true;
        field_started = true;
      } else if (c == ',') {
        fields.push_back(std::move(field));
        field.clear();
        field_started = false;
      } else if (c == '\n') {
        ++line_;
        break;
      } else if (c == '\r') {
        // tolerate CRLF
      } else {
        field.push_back(c);
        field_started = true;
      }
    }
    if (quoted) throw FormatError("line " + std::to_string(line) + ": unterminated quote");
    fields.push_back(std::move(field));
    return true;
  }

 private:
  std::string_view text_;
  std::size_t pos_ = 0;
  std::size_t line_ = 1;
};

void append_csv_field(std::string& out, std::string_view field) {
  if (field.find_first_of(",\"\n\r") == std::string_view::npos) {
    out += field;
    return;
  }
  out.push_back('"');
  for (char c : field) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
}

std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

struct Layout {
  std::size_t event_id = 0, timestamp = 0, label = 0, rules = 0;
  std::optional<std::size_t> concepts;
  std::vector<std::size_t> numeric_cols;
  std::vector<std::size_t> categorical_cols;
  FeatureSchema schema;
  std::size_t width = 0;
};

Layout parse_header(const std::vector<std::string>& header, bool need_concepts) {
  Layout layout;
  layout.width = header.size();
  std::optional<std::size_t> id, ts, label, rules;
  for (std::size_t i = 0; i < header.size(); ++i) {
    const std::string& h = header[i];
    if (h == "event_id") {
      id = i;
    } else if (h == "timestamp") {
      ts = i;
    } else if (h == "label") {
      label = i;
    } else if (h == "rules") {
      rules = i;
    } else if (h == "concepts") {
      layout.concepts = i;
    } else if (h.rfind("num_", 0) == 0) {
      layout.numeric_cols.push_back(i);
      layout.schema.numeric.push_back(h.substr(4));
    } else if (h.rfind("cat_", 0) == 0) {
      layout.categorical_cols.push_back(i);
      layout.schema.categorical.push_back(h.substr(4));
    } else {
      throw FormatError("line 1: unexpected column \"" + h + "\"");
    }
  }
  if (!id || !ts || !label || !rules) {
    throw FormatError("line 1: header must contain event_id, timestamp, label and rules");
  }
  if (need_concepts && !layout.concepts) {
    throw FormatError("line 1: annotated file lacks a concepts column");
  }
  layout.event_id = *id;
  layout.timestamp = *ts;
  layout.label = *label;
  layout.rules = *rules;
  return layout;
}

std::string line_prefix(std::size_t line) { return "line " + std::to_string(line) + ": "; }

RawEvent parse_row(const Layout& layout, const std::vector<std::string>& f, std::size_t line) {
  if (f.size() != layout.width) {
    throw FormatError(line_prefix(line) + "expected " + std::to_string(layout.width) +
                      " fields, got " + std::to_string(f.size()));
  }
  RawEvent e;
  e.event_id = f[layout.event_id];
  if (e.event_id.empty()) throw FormatError(line_prefix(line) + "empty event_id");
  try {
    e.timestamp = parse_timestamp(f[layout.timestamp]);
  } catch (const FormatError& err) {
    throw FormatError(line_prefix(line) + err.what());
  }
  const std::string& label = f[layout.label];
  if (label != "0" && label != "1") {
    throw FormatError(line_prefix(line) + "label must be 0 or 1, got \"" + label + "\"");
  }
  e.fraud_label = label == "1" ? 1 : 0;
  e.triggered_rules = split(f[layout.rules], '|');
  e.numeric.reserve(layout.numeric_cols.size());
  for (std::size_t col : layout.numeric_cols) {
    const std::string& cell = f[col];
    if (cell.empty()) {
      e.numeric.emplace_back(std::nullopt);
      continue;
    }
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
    if (ec != std::errc{} || ptr != cell.data() + cell.size() || !std::isfinite(v)) {
      throw FormatError(line_prefix(line) + "bad numeric value \"" + cell + "\"");
    }
    e.numeric.emplace_back(v);
  }
  e.categorical.reserve(layout.categorical_cols.size());
  for (std::size_t col : layout.categorical_cols) {
    const std::string& cell = f[col];
    if (cell.empty()) {
      e.categorical.emplace_back(std::nullopt);
    } else {
      e.categorical.emplace_back(cell);
    }
  }
  return e;
}

template <class Event, class RowFn>
EventTable<Event> parse_table(std::string_view csv, bool need_concepts, RowFn&& make) {
  CsvReader reader(csv);
  std::vector<std::string> fields;
  std::size_t line = 0;
  if (!reader.next(fields, line)) throw FormatError("empty CSV: missing header row");
  const Layout layout = parse_header(fields, need_concepts);
  EventTable<Event> table;
  table.schema = layout.schema;
  std::unordered_set<std::string> seen;
  while (reader.next(fields, line)) {
    if (fields.size() == 1 && fields[0].empty()) continue;  // blank line
    Event e = make(layout, fields, line);
    if (!seen.insert(e.event_id).second) {
      ++table.duplicates_removed;
      continue;
    }
    table.events.push_back(std::move(e));
  }
  return table;
}

std::string header_line(const FeatureSchema& schema, bool with_concepts) {
  std::string out = "event_id,timestamp,label,rules";
  if (with_concepts) out += ",concepts";
  for (const auto& n : schema.numeric) {
    out += ",";
    append_csv_field(out, "num_" + n);
  }
  for (const auto& c : schema.categorical) {
    out += ",";
    append_csv_field(out, "cat_" + c);
  }
  out += "\n";
  return out;
}

void append_row(std::string& out, const RawEvent& e, const std::string* concepts) {
  append_csv_field(out, e.event_id);
  out += ",";
  out += format_timestamp(e.timestamp);
  out += e.fraud_label ? ",1," : ",0,";
  append_csv_field(out, join(e.triggered_rules, '|'));
  if (concepts) {
    out += ",";
    append_csv_field(out, *concepts);
  }
  for (const auto& v : e.numeric) {
    out += ",";
    if (v) out += format_double(*v);
  }
  for (const auto& v : e.categorical) {
    out += ",";
    if (v) append_csv_field(out, *v);
  }
  out += "\n";
}

}  // namespace

RawTable parse_events(std::string_view csv) {
  return parse_table<RawEvent>(csv, false, [](const Layout& l, const auto& f, std::size_t line) {
    return parse_row(l, f, line);
  });
}

RawTable read_events(const std::filesystem::path& path) { return parse_events(read_file(path)); }

AnnotatedTable parse_annotated(std::string_view csv, const ConceptTaxonomy& tax) {
  return parse_table<AnnotatedEvent>(
      csv, true, [&tax](const Layout& l, const auto& f, std::size_t line) {
        AnnotatedEvent e;
        static_cast<RawEvent&>(e) = parse_row(l, f, line);
        e.concepts.assign(tax.size(), 0);
        for (const std::string& id : split(f[*l.concepts], '|')) {
          const auto pos = tax.find(id);
          if (!pos) throw FormatError(line_prefix(line) + "unknown concept \"" + id + "\"");
          e.concepts[*pos] = 1;
        }
        return e;
      });
}

AnnotatedTable read_annotated(const std::filesystem::path& path, const ConceptTaxonomy& tax) {
  return parse_annotated(read_file(path), tax);
}

std::string format_events(const FeatureSchema& schema, std::span<const RawEvent> events) {
  std::string out = header_line(schema, false);
  for (const RawEvent& e : events) append_row(out, e, nullptr);
  return out;
}

std::string format_annotated(const FeatureSchema& schema, std::span<const AnnotatedEvent> events,
                             const ConceptTaxonomy& tax) {
  std::string out = header_line(schema, true);
  std::vector<std::string> ids;
  for (const AnnotatedEvent& e : events) {
    ids.clear();
    for (std::size_t i = 0; i < e.concepts.size(); ++i) {
      if (e.concepts[i]) ids.push_back(tax.at(i).id);
    }
    const std::string concepts = join(ids, '|');
    append_row(out, e, &concepts);
  }
  return out;
}

void write_events(const std::filesystem::path& path, const FeatureSchema& schema,
                  std::span<const RawEvent> events) {
  write_file_atomic(path, format_events(schema, events));
}

void write_annotated(const std::filesystem::path& path, const FeatureSchema& schema,
                     std::span<const AnnotatedEvent> events, const ConceptTaxonomy& tax) {
  write_file_atomic(path, format_annotated(schema, events, tax));
}

template <class Event>
void conform(EventTable<Event>& table, const FeatureSchema& schema) {
  if (table.schema == schema) return;
  auto positions = [](const std::vector<std::string>& have, const std::vector<std::string>& want,
                      const char* kind) {
    std::vector<std::size_t> pos;
    for (const auto& name : want) {
      auto it = std::find(have.begin(), have.end(), name);
      if (it == have.end()) {
        throw ValidationError(std::string("missing ") + kind + " feature column \"" + name + "\"");
      }
      pos.push_back(static_cast<std::size_t>(it - have.begin()));
    }
    return pos;
  };
  const auto num = positions(table.schema.numeric, schema.numeric, "numeric");
  const auto cat = positions(table.schema.categorical, schema.categorical, "categorical");
  for (Event& e : table.events) {
    std::vector<std::optional<double>> n;
    std::vector<std::optional<std::string>> c;
    for (std::size_t p : num) n.push_back(e.numeric[p]);
    for (std::size_t p : cat) c.push_back(std::move(e.categorical[p]));
    e.numeric = std::move(n);
    e.categorical = std::move(c);
  }
  table.schema = schema;
}

template void conform(EventTable<RawEvent>&, const FeatureSchema&);
template void conform(EventTable<AnnotatedEvent>&, const FeatureSchema&);

void SplitSpec::validate() const {
  if (!(train_end < val_end && val_end < test_end && test_end < prod_end)) {
    throw ValidationError("split boundaries must be strictly increasing");
  }
  if (!(undersample_keep_rate > 0.0 && undersample_keep_rate <= 1.0)) {
    throw ValidationError("undersample keep rate must be in (0, 1]");
  }
}

SplitSpec split_by_fraction(std::span<const Timestamp> timestamps, std::array<double, 3> cumulative,
                            double keep_rate, std::uint64_t seed) {
  if (timestamps.empty()) throw ValidationError("cannot derive split boundaries from no events");
  std::vector<Timestamp> sorted(timestamps.begin(), timestamps.end());
  std::sort(sorted.begin(), sorted.end());
  auto at = [&](double q) {
    const auto k = static_cast<std::size_t>(std::floor(q * static_cast<double>(sorted.size())));
    return sorted[std::min(k, sorted.size() - 1)];
  };
  SplitSpec spec;
  spec.train_end = at(cumulative[0]);
  spec.val_end = std::max(at(cumulative[1]), spec.train_end + 1);
  spec.test_end = std::max(at(cumulative[2]), spec.val_end + 1);
  spec.prod_end = std::max(sorted.back() + 1, spec.test_end + 1);
  spec.undersample_keep_rate = keep_rate;
  spec.seed = seed;
  spec.validate();
  return spec;
}

template <class Event>
std::vector<Event> undersample_negatives(std::span<const Event> train, double keep_rate,
                                         std::uint64_t seed) {
  if (!(keep_rate > 0.0 && keep_rate <= 1.0)) {
    throw ValidationError("undersample keep rate must be in (0, 1]");
  }
  Rng rng(seed);
  std::vector<Event> out;
  out.reserve(train.size());
  for (const Event& e : train) {
    // One draw per negative regardless of keep_rate keeps selections nested
    // across rates for a fixed seed.
    if (e.fraud_label == 1) {
      out.push_back(e);
    } else if (rng.uniform() < keep_rate) {
      out.push_back(e);
    }
  }
  return out;
}

template std::vector<RawEvent> undersample_negatives(std::span<const RawEvent>, double,
                                                     std::uint64_t);
template std::vector<AnnotatedEvent> undersample_negatives(std::span<const AnnotatedEvent>, double,
                                                           std::uint64_t);

// ---------------------------------------------------------------- codec

template <class Event>
FeatureCodec FeatureCodec::fit(const FeatureSchema& schema, std::span<const Event> train,
                               std::size_t top_k) {
  std::vector<std::vector<std::optional<double>>> numeric(schema.numeric.size());
  std::vector<std::vector<std::optional<std::string>>> cats(schema.categorical.size());
  for (const Event& e : train) {
    if (e.numeric.size() != schema.numeric.size() ||
        e.categorical.size() != schema.categorical.size()) {
      throw ValidationError("event " + e.event_id + " does not match the feature schema");
    }
    for (std::size_t i = 0; i < numeric.size(); ++i) numeric[i].push_back(e.numeric[i]);
    for (std::size_t i = 0; i < cats.size(); ++i) cats[i].push_back(e.categorical[i]);
  }
  return fit_columns(schema, numeric, cats, top_k);
}

template FeatureCodec FeatureCodec::fit(const FeatureSchema&, std::span<const RawEvent>,
                                        std::size_t);
template FeatureCodec FeatureCodec::fit(const FeatureSchema&, std::span<const AnnotatedEvent>,
                                        std::size_t);

FeatureCodec FeatureCodec::fit_columns(
    const FeatureSchema& schema, const std::vector<std::vector<std::optional<double>>>& numeric,
    const std::vector<std::vector<std::optional<std::string>>>& cats, std::size_t top_k) {
  FeatureCodec codec;
  codec.schema_ = schema;
  for (const auto& column : numeric) {
    std::vector<double> observed;
    for (const auto& v : column) {
      if (v) observed.push_back(*v);
    }
    NumericStats st;
    if (!observed.empty()) {
      std::sort(observed.begin(), observed.end());
      const std::size_t n = observed.size();
      st.impute_value = n % 2 ? observed[n / 2] : 0.5 * (observed[n / 2 - 1] + observed[n / 2]);
    }
    // Moments over the imputed column, so encoded train values have mean 0
    // and unit variance.
    double sum = 0.0;
    for (const auto& v : column) sum += v.value_or(st.impute_value);
    const double count = static_cast<double>(std::max<std::size_t>(column.size(), 1));
    st.mean = sum / count;
    double sq = 0.0;
    for (const auto& v : column) {
      const double d = v.value_or(st.impute_value) - st.mean;
      sq += d * d;
    }
    st.stddev = std::sqrt(sq / count);
    if (!(st.stddev >= kMinStddev)) st.stddev = 0.0;  // constant column: always encodes to 0
    codec.numeric_.push_back(st);
  }
  for (const auto& column : cats) {
    std::map<std::string, std::size_t> freq;
    for (const auto& v : column) {
      if (v) ++freq[*v];
    }
    std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
    // Most frequent first, ties by name.
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    if (ranked.size() > top_k) ranked.resize(top_k);
    std::vector<std::string> vocab;
    for (auto& [name, count] : ranked) vocab.push_back(name);
    codec.vocab_.push_back(std::move(vocab));
  }
  codec.finalize();
  return codec;
}

void FeatureCodec::finalize() {
  dimension_ = 2 * numeric_.size();
  for (const auto& v : vocab_) dimension_ += v.size() + 2;
  fitted_ = true;
}

std::vector<std::string> FeatureCodec::feature_names() const {
  std::vector<std::string> names;
  for (const auto& n : schema_.numeric) {
    names.push_back(n);
    names.push_back(n + "__missing");
  }
  for (std::size_t i = 0; i < vocab_.size(); ++i) {
    const std::string& n = schema_.categorical[i];
    for (const auto& v : vocab_[i]) names.push_back(n + "=" + v);
    names.push_back(n + "__other");
    names.push_back(n + "__missing");
  }
  return names;
}

void FeatureCodec::encode_into(const RawEvent& event, std::span<double> x) const {
  if (!fitted_) throw UsageError("FeatureCodec::encode called before fit");
  if (x.size() != dimension_) throw ValidationError("encode: output width mismatch");
  if (event.numeric.size() != numeric_.size() || event.categorical.size() != vocab_.size()) {
    throw ValidationError("event " + event.event_id + " does not match the codec schema");
  }
  std::size_t k = 0;
  for (std::size_t i = 0; i < numeric_.size(); ++i) {
    const NumericStats& st = numeric_[i];
    const auto& v = event.numeric[i];
    x[k++] = st.stddev > 0.0 ? (v.value_or(st.impute_value) - st.mean) / st.stddev : 0.0;
    x[k++] = v ? 0.0 : 1.0;
  }
  for (std::size_t i = 0; i < vocab_.size(); ++i) {
    const auto& vocab = vocab_[i];
    const std::size_t width = vocab.size() + 2;
    std::fill(x.begin() + static_cast<std::ptrdiff_t>(k),
              x.begin() + static_cast<std::ptrdiff_t>(k + width), 0.0);
    const auto& v = event.categorical[i];
    if (!v) {
      x[k + vocab.size() + 1] = 1.0;
    } else {
      auto it = std::find(vocab.begin(), vocab.end(), *v);
      x[k + static_cast<std::size_t>(it - vocab.begin())] = 1.0;  // end() lands on "other"
    }
    k += width;
  }
}

std::vector<double> FeatureCodec::encode(const RawEvent& event) const {
  std::vector<double> x(dimension_);
  encode_into(event, x);
  return x;
}

json FeatureCodec::to_json() const {
  if (!fitted_) throw UsageError("cannot serialize an unfitted codec");
  json num = json::array();
  for (std::size_t i = 0; i < numeric_.size(); ++i) {
    num.push_back({{"name", schema_.numeric[i]},
                   {"impute_value", numeric_[i].impute_value},
                   {"mean", numeric_[i].mean},
                   {"stddev", numeric_[i].stddev}});
  }
  json cat = json::array();
  for (std::size_t i = 0; i < vocab_.size(); ++i) {
    cat.push_back({{"name", schema_.categorical[i]}, {"vocabulary", vocab_[i]}});
  }
  return {{"numeric", num}, {"categorical", cat}};
}

FeatureCodec FeatureCodec::from_json(const json& j) {
  FeatureCodec codec;
  try {
    for (const json& n : j.at("numeric")) {
      codec.schema_.numeric.push_back(n.at("name").get<std::string>());
      codec.numeric_.push_back({n.at("impute_value").get<double>(), n.at("mean").get<double>(),
                                n.at("stddev").get<double>()});
    }
    for (const json& c : j.at("categorical")) {
      codec.schema_.categorical.push_back(c.at("name").get<std::string>());
      codec.vocab_.push_back(c.at("vocabulary").get<std::vector<std::string>>());
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("codec: ") + e.what());
  }
  codec.finalize();
  return codec;
}

void FeatureCodec::save(const std::filesystem::path& path) const {
  write_file_atomic(path, to_json().dump(2) + "\n");
}

FeatureCodec FeatureCodec::load(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw FormatError("codec: " + std::string(e.what()));
  }
  return from_json(j);
}

EncodedInstance encode(const FeatureCodec& codec, const AnnotatedEvent& event) {
  EncodedInstance inst;
  inst.x = codec.encode(event);
  inst.y[kFraudClass] = event.fraud_label == 1 ? 1.0 : 0.0;
  inst.y[1 - kFraudClass] = 1.0 - inst.y[kFraudClass];
  inst.s.assign(event.concepts.begin(), event.concepts.end());
  return inst;
}

Matrix EncodedSet::decision_targets(std::span<const std::size_t> rows) const {
  Matrix y(rows.size(), kNumDecisions);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    y(i, labels[rows[i]] == 1 ? kFraudClass : 1 - kFraudClass) = 1.0;
  }
  return y;
}

Matrix EncodedSet::decision_targets() const {
  std::vector<std::size_t> all(size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return decision_targets(all);
}

std::size_t EncodedSet::positives() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
}

EncodedSet encode_all(const FeatureCodec& codec, std::span<const AnnotatedEvent> events) {
  EncodedSet set;
  const std::size_t n_concepts = events.empty() ? 0 : events.front().concepts.size();
  set.x = Matrix(events.size(), codec.dimension());
  set.concepts = Matrix(events.size(), n_concepts);
  set.labels.reserve(events.size());
  set.event_ids.reserve(events.size());
  for (std::size_t i = 0; i < events.size(); ++i) {
    const AnnotatedEvent& e = events[i];
    codec.encode_into(e, set.x.row(i));
    if (e.concepts.size() != n_concepts) throw ValidationError("inconsistent concept widths");
    for (std::size_t c = 0; c < n_concepts; ++c) set.concepts(i, c) = e.concepts[c];
    set.labels.push_back(e.fraud_label);
    set.event_ids.push_back(e.event_id);
  }
  return set;
}

// ---------------------------------------------------------------- batching

void BatchPlan::validate() const {
  if (batch_size == 0) throw ValidationError("batch size must be positive");
  if (min_positives_per_batch == 0) throw ValidationError("min positives per batch must be >= 1");
  if (min_positives_per_batch > batch_size) {
    throw ValidationError("min positives per batch exceeds the batch size");
  }
}

std::vector<std::vector<std::size_t>> sample_batches(std::span<const int> labels,
                                                     const BatchPlan& plan) {
  plan.validate();
  std::vector<std::size_t> positives;
  std::vector<std::size_t> negatives;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    (labels[i] == 1 ? positives : negatives).push_back(i);
  }
  if (positives.empty()) throw ValidationError("cannot satisfy prevalence constraint");

  Rng rng(plan.seed);
  rng.shuffle(std::span<std::size_t>(negatives));
  rng.shuffle(std::span<std::size_t>(positives));

  const std::size_t pool = negatives.empty() ? positives.size() : negatives.size();
  const std::size_t n_batches = (pool + plan.batch_size - 1) / plan.batch_size;
  std::vector<std::vector<std::size_t>> batches(n_batches);
  if (!negatives.empty()) {
    for (std::size_t b = 0; b < n_batches; ++b) {
      const std::size_t begin = b * plan.batch_size;
      const std::size_t end = std::min(begin + plan.batch_size, negatives.size());
      batches[b].assign(negatives.begin() + static_cast<std::ptrdiff_t>(begin),
                        negatives.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }
  const std::size_t slots = std::max(positives.size(), n_batches * plan.min_positives_per_batch);
  for (std::size_t j = 0; j < slots; ++j) {
    batches[j % n_batches].push_back(positives[j % positives.size()]);
  }
  return batches;
}

}  // namespace joel
