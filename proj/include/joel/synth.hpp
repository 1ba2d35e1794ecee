#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "joel/dataset.hpp"
#include "joel/taxonomy.hpp"

namespace joel {

struct SynthConcept {
  std::string id;
  Polarity polarity = Polarity::fraud;  // fraud or legit
  double base_rate = 0.1;               // activation probability before conditioning
  std::size_t rules = 1;                // 0 plants a cold-start concept
};

struct SynthConfig {
  std::size_t n_events = 10000;
  double prevalence = 0.025;
  double label_noise = 0.0;  // probability of flipping the observed label
  // Fraud iff at least this many fraud-polarity concepts are active.
  std::size_t min_fraud_concepts = 2;
  std::size_t noise_numeric = 4;
  double missing_rate = 0.02;  // applies to noise features only
  Timestamp start = 1'577'836'800;  // 2020-01-01
  Timestamp step_secs = 60;
  std::vector<SynthConcept> concepts;

  void validate() const;
  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
  // Eight planted concepts (six fraud, two legit), one rule family each.
  static SynthConfig standard(std::size_t n_events);
};

// A planted concept is active iff sum_k weights[k] * x[features[k]] > threshold.
struct ConceptRule {
  std::vector<std::size_t> features;  // numeric column indices
  std::vector<double> weights;
  double threshold = 0.0;
};

struct SynthData {
  FeatureSchema schema;
  ConceptTaxonomy taxonomy;  // planted concepts then other_fraud, other_legit
  RuleConceptMapping mapping;
  std::vector<ConceptRule> planted;  // taxonomy order, planted concepts only
  std::vector<std::vector<std::string>> concept_rules;  // rule ids per planted concept
  std::vector<RawEvent> events;        // observed (noisy) labels and fired rules
  std::vector<AnnotatedEvent> truth;   // clean labels and true concepts

  // Active planted concepts of an event, evaluated from its features.
  std::vector<bool> true_concepts(const RawEvent& e) const;
};

// Throws ValidationError on an invalid config.
SynthData generate_synthetic(const SynthConfig& config, std::uint64_t seed);

// Writes events.csv, taxonomy.json, mapping.json and truth.csv.
void write_synthetic(const SynthData& data, const std::filesystem::path& dir);

// Upper-tail standard normal quantile: z with P(Z > z) = p.
double normal_upper_quantile(double p);

}  // namespace joel
