#include "joel/annotate.hpp"

namespace joel {

std::size_t AnnotationResult::unknown_rule_total() const {
  std::size_t total = 0;
  for (const auto& [rule, count] : unknown_rules) total += count;
  return total;
}

AnnotatedEvent annotate_event(const RawEvent& raw, const RuleConceptMapping& m,
                              const ConceptTaxonomy& tax) {
  AnnotatedEvent out;
  static_cast<RawEvent&>(out) = raw;
  out.concepts.assign(tax.size(), 0);
  const MappedConcepts mapped = map_rules(raw.triggered_rules, m);
  for (std::size_t pos : mapped.concepts) out.concepts[pos] = 1;
  if (mapped.concepts.empty()) out.concepts[tax.fallback_for(raw.fraud_label)] = 1;
  return out;
}

AnnotationResult annotate_dataset(std::span<const RawEvent> raw, const RuleConceptMapping& m,
                                  const ConceptTaxonomy& tax) {
  AnnotationResult result;
  result.events.reserve(raw.size());
  for (const RawEvent& e : raw) {
    for (const std::string& rule : e.triggered_rules) {
      if (m.find(rule) == nullptr) ++result.unknown_rules[rule];
    }
    result.events.push_back(annotate_event(e, m, tax));
    const ConceptBits& bits = result.events.back().concepts;
    if (bits[tax.other_fraud_index()] || bits[tax.other_legit_index()]) ++result.fallback_rows;
  }
  return result;
}

}  // namespace joel
