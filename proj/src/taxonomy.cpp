#include "joel/taxonomy.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "joel/error.hpp"
#include "joel/io_util.hpp"

namespace joel {

using nlohmann::json;

std::string_view to_string(Polarity p) {
  switch (p) {
    case Polarity::fraud:
      return "fraud";
    case Polarity::legit:
      return "legit";
    case Polarity::other_fraud:
      return "other_fraud";
    case Polarity::other_legit:
      return "other_legit";
  }
  return "fraud";
}

Polarity polarity_from_string(std::string_view s) {
  if (s == "fraud") return Polarity::fraud;
  if (s == "legit") return Polarity::legit;
  if (s == "other_fraud") return Polarity::other_fraud;
  if (s == "other_legit") return Polarity::other_legit;
  throw ValidationError("unknown polarity \"" + std::string(s) + "\"");
}

namespace {

bool has_whitespace(std::string_view s) {
  return std::any_of(s.begin(), s.end(),
                     [](unsigned char c) { return std::isspace(c) != 0; });
}

// 1-based line of the n-th (0-based) occurrence of `needle`, or 0.
std::size_t line_of_occurrence(std::string_view text, std::string_view needle, std::size_t n) {
  std::size_t pos = 0;
  for (std::size_t k = 0;; ++k) {
    pos = text.find(needle, pos);
    if (pos == std::string_view::npos) return 0;
    if (k == n) break;
    pos += needle.size();
  }
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + pos, '\n'));
}

std::string at_line(std::size_t line) {
  return line == 0 ? std::string{} : " (line " + std::to_string(line) + ")";
}

json parse_json_text(std::string_view text, std::string_view what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string(what) + ": " + e.what());
  }
}

}  // namespace

ConceptTaxonomy::ConceptTaxonomy(std::vector<Concept> concepts) : concepts_(std::move(concepts)) {
  if (concepts_.empty()) throw ValidationError("taxonomy must be non-empty");
  std::optional<std::size_t> other_fraud;
  std::optional<std::size_t> other_legit;
  for (std::size_t i = 0; i < concepts_.size(); ++i) {
    const Concept& c = concepts_[i];
    if (c.id.empty() || has_whitespace(c.id)) {
      throw ValidationError("concept #" + std::to_string(i) + ": id \"" + c.id +
                            "\" must be non-empty and contain no whitespace");
    }
    if (!index_.emplace(c.id, i).second) {
      throw ValidationError("duplicate concept id \"" + c.id + "\"");
    }
    if (c.polarity == Polarity::other_fraud) {
      if (other_fraud) throw ValidationError("duplicate other_fraud concept \"" + c.id + "\"");
      other_fraud = i;
    } else if (c.polarity == Polarity::other_legit) {
      if (other_legit) throw ValidationError("duplicate other_legit concept \"" + c.id + "\"");
      other_legit = i;
    }
  }
  if (!other_fraud) throw ValidationError("taxonomy is missing an other_fraud concept");
  if (!other_legit) throw ValidationError("taxonomy is missing an other_legit concept");
  other_fraud_ = *other_fraud;
  other_legit_ = *other_legit;
}

std::optional<std::size_t> ConceptTaxonomy::find(std::string_view id) const {
  auto it = index_.find(std::string(id));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t ConceptTaxonomy::index_of(std::string_view id) const {
  if (auto pos = find(id)) return *pos;
  throw ValidationError("unknown concept id \"" + std::string(id) + "\"");
}

json ConceptTaxonomy::to_json() const {
  json arr = json::array();
  for (const Concept& c : concepts_) {
    arr.push_back({{"id", c.id},
                   {"display_name", c.display_name},
                   {"polarity", to_string(c.polarity)},
                   {"description", c.description}});
  }
  return arr;
}

ConceptTaxonomy ConceptTaxonomy::from_json(const json& j) {
  if (!j.is_array()) throw FormatError("taxonomy: expected a JSON array of concepts");
  std::vector<Concept> concepts;
  concepts.reserve(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) {
    const json& e = j[i];
    if (!e.is_object() || !e.contains("id") || !e["id"].is_string()) {
      throw FormatError("taxonomy: concept #" + std::to_string(i) + " needs a string \"id\"");
    }
    Concept c;
    c.id = e["id"].get<std::string>();
    c.display_name = e.value("display_name", c.id);
    c.polarity = polarity_from_string(e.value("polarity", std::string{"fraud"}));
    c.description = e.value("description", std::string{});
    concepts.push_back(std::move(c));
  }
  return ConceptTaxonomy(std::move(concepts));
}

std::string ConceptTaxonomy::sha256() const { return sha256_hex(to_json().dump()); }

ConceptTaxonomy parse_taxonomy(std::string_view text) {
  const json j = parse_json_text(text, "taxonomy");
  try {
    return ConceptTaxonomy::from_json(j);
  } catch (const ValidationError& e) {
    // Point at the offending entry when the message names an id.
    std::string msg = e.what();
    const auto open = msg.find('"');
    const auto close = open == std::string::npos ? open : msg.find('"', open + 1);
    if (close != std::string::npos) {
      const std::string quoted = msg.substr(open, close - open + 1);
      const bool duplicate = msg.find("duplicate") != std::string::npos;
      msg += at_line(line_of_occurrence(text, quoted, duplicate ? 1 : 0));
    }
    throw ValidationError(msg);
  }
}

ConceptTaxonomy load_taxonomy(const std::filesystem::path& path) {
  return parse_taxonomy(read_file(path));
}

void save_taxonomy(const ConceptTaxonomy& tax, const std::filesystem::path& path) {
  write_file_atomic(path, tax.to_json().dump(2) + "\n");
}

ConceptTaxonomy fraud_taxonomy() {
  using P = Polarity;
  return ConceptTaxonomy({
      {"all_details_match", "All details match", P::legit,
       "Matching information for all or most of the transaction details"},
      {"nothing_suspicious", "Nothing suspicious", P::legit, "Transaction has no risky signals"},
      {"good_customer_history", "Good customer history", P::legit,
       "Legitimate purchase history"},
      {"other_legit", "Other legit", P::other_legit, "Unknown legitimate behaviour"},
      {"suspicious_device", "Suspicious Device", P::fraud,
       "Transaction has suspicious device information"},
      {"suspicious_items", "Suspicious Items", P::fraud, "Transaction has suspicious items"},
      {"suspicious_payment", "Suspicious Payment", P::fraud, "Payment details are doubtful"},
      {"suspicious_email", "Suspicious Email", P::fraud, "Email information is mistrustful"},
      {"suspicious_billing_shipping", "Suspicious billing shipping", P::fraud,
       "Shipping or/and billing information is dubious"},
      {"suspicious_ip", "Suspicious IP", P::fraud, "IP information is suspicious"},
      {"suspicious_customer", "Suspicious Customer", P::fraud,
       "Customer information is suspicious"},
      {"suspicious_delivery", "Suspicious Delivery", P::fraud,
       "Transaction has a suspicious type of shipment"},
      {"high_speed_ordering", "High speed ordering", P::fraud,
       "Several transactions in a short period of time"},
      {"other_fraud", "Other fraud", P::other_fraud, "Unknown fraud concept"},
  });
}

void RuleConceptMapping::add(const std::string& rule_id,
                             const std::vector<std::string>& concept_ids,
                             const ConceptTaxonomy& tax) {
  if (rule_id.empty()) throw ValidationError("mapping: empty rule id");
  if (concept_ids.empty()) {
    throw ValidationError("mapping: rule \"" + rule_id + "\" has an empty concept set");
  }
  std::set<std::size_t> positions;
  for (const std::string& id : concept_ids) {
    const auto pos = tax.find(id);
    if (!pos) {
      throw ValidationError("mapping: rule \"" + rule_id + "\" maps to unknown concept \"" + id +
                            "\"");
    }
    if (tax.at(*pos).is_fallback()) {
      throw ValidationError("mapping: rule \"" + rule_id + "\" maps to fallback concept \"" + id +
                            "\"; fallbacks are assigned by the annotator only");
    }
    positions.insert(*pos);
  }
  entries_[rule_id] = std::move(positions);
}

const std::set<std::size_t>* RuleConceptMapping::find(std::string_view rule_id) const {
  auto it = entries_.find(rule_id);
  return it == entries_.end() ? nullptr : &it->second;
}

json RuleConceptMapping::to_json(const ConceptTaxonomy& tax) const {
  json obj = json::object();
  for (const auto& [rule, concepts] : entries_) {
    json ids = json::array();
    for (std::size_t pos : concepts) ids.push_back(tax.at(pos).id);
    obj[rule] = std::move(ids);
  }
  return obj;
}

RuleConceptMapping parse_mapping(std::string_view text, const ConceptTaxonomy& tax) {
  const json j = parse_json_text(text, "mapping");
  if (!j.is_object()) throw FormatError("mapping: expected a JSON object {rule_id: [concepts]}");
  RuleConceptMapping m;
  for (const auto& [rule, concepts] : j.items()) {
    if (!concepts.is_array()) {
      throw FormatError("mapping: rule \"" + rule + "\" must map to an array of concept ids");
    }
    std::vector<std::string> ids;
    for (const json& c : concepts) {
      if (!c.is_string()) throw FormatError("mapping: rule \"" + rule + "\" has a non-string id");
      ids.push_back(c.get<std::string>());
    }
    m.add(rule, ids, tax);
  }
  return m;
}

RuleConceptMapping load_mapping(const std::filesystem::path& path, const ConceptTaxonomy& tax) {
  return parse_mapping(read_file(path), tax);
}

void save_mapping(const RuleConceptMapping& m, const ConceptTaxonomy& tax,
                  const std::filesystem::path& path) {
  write_file_atomic(path, m.to_json(tax).dump(2) + "\n");
}

MappedConcepts map_rules(const std::vector<std::string>& triggered, const RuleConceptMapping& m) {
  MappedConcepts out;
  for (const std::string& rule : triggered) {
    if (const auto* concepts = m.find(rule)) {
      out.concepts.insert(concepts->begin(), concepts->end());
    } else {
      ++out.unknown_rules;
    }
  }
  return out;
}

std::size_t CoverageReport::total_pairs() const {
  std::size_t total = 0;
  for (std::size_t c : per_concept_rule_count) total += c;
  return total;
}

json CoverageReport::to_json(const ConceptTaxonomy& tax) const {
  json obj = json::object();
  for (std::size_t i = 0; i < per_concept_rule_count.size(); ++i) {
    obj[tax.at(i).id] = per_concept_rule_count[i];
  }
  return obj;
}

CoverageReport mapping_coverage(const RuleConceptMapping& m, const ConceptTaxonomy& tax) {
  CoverageReport report;
  report.per_concept_rule_count.assign(tax.size(), 0);
  for (const auto& [rule, concepts] : m.entries()) {
    for (std::size_t pos : concepts) ++report.per_concept_rule_count.at(pos);
  }
  return report;
}

}  // namespace joel
