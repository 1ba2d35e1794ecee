#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "joel/dataset.hpp"
#include "joel/taxonomy.hpp"

namespace joel {

struct AnnotationResult {
  std::vector<AnnotatedEvent> events;
  std::map<std::string, std::size_t> unknown_rules;  // rule id -> occurrences
  std::size_t fallback_rows = 0;

  std::size_t unknown_rule_total() const;
};

// Distant supervision: one output row per input row carrying the union of the
// concepts mapped by its triggered rules, or the fallback concept matching the
// fraud label when nothing maps. Order-preserving.
AnnotationResult annotate_dataset(std::span<const RawEvent> raw, const RuleConceptMapping& m,
                                  const ConceptTaxonomy& tax);

AnnotatedEvent annotate_event(const RawEvent& raw, const RuleConceptMapping& m,
                              const ConceptTaxonomy& tax);

}  // namespace joel
