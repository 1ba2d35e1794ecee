#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace joel {

enum class Polarity { fraud, legit, other_fraud, other_legit };

std::string_view to_string(Polarity p);
Polarity polarity_from_string(std::string_view s);

struct Concept {
  std::string id;
  std::string display_name;
  Polarity polarity = Polarity::fraud;
  std::string description;

  bool is_fallback() const {
    return polarity == Polarity::other_fraud || polarity == Polarity::other_legit;
  }
};

// Ordered concept vocabulary. The order defines the concept-vector layout
// used by annotations, the semantic layer and every report.
class ConceptTaxonomy {
 public:
  ConceptTaxonomy() = default;

  // Validates the invariants (non-empty, unique whitespace-free ids, exactly
  // one other_fraud and one other_legit concept). Throws ValidationError.
  explicit ConceptTaxonomy(std::vector<Concept> concepts);

  std::size_t size() const { return concepts_.size(); }
  bool empty() const { return concepts_.empty(); }
  const std::vector<Concept>& concepts() const { return concepts_; }
  const Concept& at(std::size_t pos) const { return concepts_.at(pos); }

  std::optional<std::size_t> find(std::string_view id) const;
  // Throws ValidationError for unknown ids.
  std::size_t index_of(std::string_view id) const;

  std::size_t other_fraud_index() const { return other_fraud_; }
  std::size_t other_legit_index() const { return other_legit_; }
  std::size_t fallback_for(int fraud_label) const {
    return fraud_label == 1 ? other_fraud_ : other_legit_;
  }

  // Canonical JSON array form; also the input to sha256().
  nlohmann::json to_json() const;
  static ConceptTaxonomy from_json(const nlohmann::json& j);

  // Hex SHA-256 of the canonical serialization. Checkpoints record it.
  std::string sha256() const;

  friend bool operator==(const ConceptTaxonomy& a, const ConceptTaxonomy& b) {
    return a.sha256() == b.sha256();
  }

 private:
  std::vector<Concept> concepts_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t other_fraud_ = 0;
  std::size_t other_legit_ = 0;
};

ConceptTaxonomy load_taxonomy(const std::filesystem::path& path);
ConceptTaxonomy parse_taxonomy(std::string_view text);
void save_taxonomy(const ConceptTaxonomy& tax, const std::filesystem::path& path);

// The fourteen-concept fraud taxonomy used in the e-commerce deployment.
ConceptTaxonomy fraud_taxonomy();

// rule id -> non-empty set of concept positions (taxonomy order).
class RuleConceptMapping {
 public:
  RuleConceptMapping() = default;

  // Throws ValidationError on unknown/fallback concepts or empty sets.
  void add(const std::string& rule_id, const std::vector<std::string>& concept_ids,
           const ConceptTaxonomy& tax);

  const std::set<std::size_t>* find(std::string_view rule_id) const;
  const std::map<std::string, std::set<std::size_t>, std::less<>>& entries() const {
    return entries_;
  }
  std::size_t size() const { return entries_.size(); }

  nlohmann::json to_json(const ConceptTaxonomy& tax) const;

 private:
  std::map<std::string, std::set<std::size_t>, std::less<>> entries_;
};

RuleConceptMapping load_mapping(const std::filesystem::path& path, const ConceptTaxonomy& tax);
RuleConceptMapping parse_mapping(std::string_view text, const ConceptTaxonomy& tax);
void save_mapping(const RuleConceptMapping& m, const ConceptTaxonomy& tax,
                  const std::filesystem::path& path);

struct MappedConcepts {
  std::set<std::size_t> concepts;
  std::size_t unknown_rules = 0;
};

// Union of the concepts mapped by every triggered rule. Unknown rule ids are
// tolerated and counted.
MappedConcepts map_rules(const std::vector<std::string>& triggered, const RuleConceptMapping& m);

struct CoverageReport {
  // Indexed by taxonomy position; zero marks a cold-start concept.
  std::vector<std::size_t> per_concept_rule_count;

  std::size_t total_pairs() const;
  nlohmann::json to_json(const ConceptTaxonomy& tax) const;
};

CoverageReport mapping_coverage(const RuleConceptMapping& m, const ConceptTaxonomy& tax);

}  // namespace joel
