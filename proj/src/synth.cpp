#include "joel/synth.hpp"

#include <cmath>
#include <cstdio>

#include <nlohmann/json.hpp>

#include "joel/error.hpp"
#include "joel/io_util.hpp"
#include "joel/rng.hpp"

namespace joel {

using nlohmann::json;

namespace {

constexpr std::size_t kMaxRejections = 100000;

const char* kChannels[] = {"web", "app", "phone", "store"};

}  // namespace

double normal_upper_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw ValidationError("quantile probability must be in (0, 1)");
  // P(Z > z) = erfc(z / sqrt 2) / 2 is decreasing in z; bisect.
  double lo = -40.0;
  double hi = 40.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (0.5 * std::erfc(mid / std::sqrt(2.0)) > p) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

void SynthConfig::validate() const {
  if (n_events == 0) throw ValidationError("synth: n_events must be positive");
  if (!(prevalence > 0.0 && prevalence < 1.0)) {
    throw ValidationError("synth: prevalence must be in (0, 1)");
  }
  if (!(label_noise >= 0.0 && label_noise <= 1.0)) {
    throw ValidationError("synth: label_noise must be in [0, 1]");
  }
  if (!(missing_rate >= 0.0 && missing_rate < 1.0)) {
    throw ValidationError("synth: missing_rate must be in [0, 1)");
  }
  if (concepts.empty()) throw ValidationError("synth: at least one planted concept is required");
  std::size_t fraud = 0;
  for (const auto& c : concepts) {
    if (c.polarity != Polarity::fraud && c.polarity != Polarity::legit) {
      throw ValidationError("synth: planted concept " + c.id + " must be fraud or legit");
    }
    if (!(c.base_rate > 0.0 && c.base_rate < 1.0)) {
      throw ValidationError("synth: base_rate of " + c.id + " must be in (0, 1)");
    }
    fraud += c.polarity == Polarity::fraud;
  }
  if (min_fraud_concepts < 1 || min_fraud_concepts > fraud) {
    throw ValidationError("synth: min_fraud_concepts must be in [1, number of fraud concepts]");
  }
}

json SynthConfig::to_json() const {
  json cs = json::array();
  for (const auto& c : concepts) {
    cs.push_back({{"id", c.id},
                  {"polarity", to_string(c.polarity)},
                  {"base_rate", c.base_rate},
                  {"rules", c.rules}});
  }
  return {{"n_events", n_events},
          {"prevalence", prevalence},
          {"label_noise", label_noise},
          {"min_fraud_concepts", min_fraud_concepts},
          {"noise_numeric", noise_numeric},
          {"missing_rate", missing_rate},
          {"start", start},
          {"step_secs", step_secs},
          {"concepts", cs}};
}

SynthConfig SynthConfig::from_json(const json& j) {
  SynthConfig c;
  c.n_events = j.value("n_events", c.n_events);
  c.prevalence = j.value("prevalence", c.prevalence);
  c.label_noise = j.value("label_noise", c.label_noise);
  c.min_fraud_concepts = j.value("min_fraud_concepts", c.min_fraud_concepts);
  c.noise_numeric = j.value("noise_numeric", c.noise_numeric);
  c.missing_rate = j.value("missing_rate", c.missing_rate);
  c.start = j.value("start", c.start);
  c.step_secs = j.value("step_secs", c.step_secs);
  if (j.contains("concepts")) {
    for (const json& cj : j.at("concepts")) {
      SynthConcept sc;
      sc.id = cj.at("id").get<std::string>();
      sc.polarity = polarity_from_string(cj.value("polarity", std::string{"fraud"}));
      sc.base_rate = cj.value("base_rate", sc.base_rate);
      sc.rules = cj.value("rules", sc.rules);
      c.concepts.push_back(std::move(sc));
    }
  } else {
    c.concepts = standard(c.n_events).concepts;
  }
  return c;
}

SynthConfig SynthConfig::standard(std::size_t n_events) {
  SynthConfig c;
  c.n_events = n_events;
  c.concepts = {
      {"suspicious_device", Polarity::fraud, 0.10, 3},
      {"suspicious_items", Polarity::fraud, 0.12, 4},
      {"suspicious_payment", Polarity::fraud, 0.10, 2},
      {"suspicious_email", Polarity::fraud, 0.08, 2},
      {"suspicious_ip", Polarity::fraud, 0.10, 3},
      {"high_speed_ordering", Polarity::fraud, 0.06, 1},
      {"good_customer_history", Polarity::legit, 0.30, 2},
      {"all_details_match", Polarity::legit, 0.40, 1},
  };
  return c;
}

std::vector<bool> SynthData::true_concepts(const RawEvent& e) const {
  std::vector<bool> active(planted.size());
  for (std::size_t c = 0; c < planted.size(); ++c) {
    const ConceptRule& r = planted[c];
    double v = 0.0;
    for (std::size_t k = 0; k < r.features.size(); ++k) {
      v += r.weights[k] * e.numeric.at(r.features[k]).value();
    }
    active[c] = v > r.threshold;
  }
  return active;
}

namespace {

std::string two_digits(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%02zu", i);
  return buf;
}

std::string humanize(const std::string& id) {
  std::string s = id;
  for (char& ch : s) {
    if (ch == '_') ch = ' ';
  }
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

ConceptTaxonomy planted_taxonomy(const SynthConfig& cfg) {
  std::vector<Concept> cs;
  for (const auto& c : cfg.concepts) {
    cs.push_back({c.id, humanize(c.id), c.polarity, "planted synthetic concept"});
  }
  cs.push_back({"other_fraud", "Other fraud", Polarity::other_fraud, "Unknown fraud concept"});
  cs.push_back({"other_legit", "Other legit", Polarity::other_legit, "Unknown legit concept"});
  return ConceptTaxonomy(std::move(cs));
}

}  // namespace

SynthData generate_synthetic(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SynthData d;
  d.taxonomy = planted_taxonomy(cfg);
  Rng layout(mix_seed(seed, 1));

  // Disjoint feature groups of 2 to 4 columns per planted concept.
  std::size_t column = 0;
  for (const auto& c : cfg.concepts) {
    ConceptRule r;
    const std::size_t width = 2 + layout.below(3);
    double norm2 = 0.0;
    for (std::size_t k = 0; k < width; ++k) {
      r.features.push_back(column++);
      const double w = layout.uniform(0.5, 1.5) * (layout.bernoulli(0.5) ? 1.0 : -1.0);
      r.weights.push_back(w);
      norm2 += w * w;
    }
    r.threshold = std::sqrt(norm2) * normal_upper_quantile(c.base_rate);
    d.planted.push_back(std::move(r));
  }
  const std::size_t signal_columns = column;
  for (std::size_t i = 0; i < signal_columns + cfg.noise_numeric; ++i) {
    d.schema.numeric.push_back("f" + two_digits(i));
  }
  d.schema.categorical = {"channel"};

  for (std::size_t c = 0; c < cfg.concepts.size(); ++c) {
    std::vector<std::string> ids;
    for (std::size_t j = 0; j < cfg.concepts[c].rules; ++j) {
      ids.push_back("r_" + cfg.concepts[c].id + "_" + std::to_string(j));
      d.mapping.add(ids.back(), {cfg.concepts[c].id}, d.taxonomy);
    }
    d.concept_rules.push_back(std::move(ids));
  }

  Rng rng(mix_seed(seed, 2));
  const std::size_t planted = cfg.concepts.size();
  d.events.reserve(cfg.n_events);
  d.truth.reserve(cfg.n_events);
  std::vector<bool> active(planted);
  for (std::size_t i = 0; i < cfg.n_events; ++i) {
    const int clean = rng.bernoulli(cfg.prevalence) ? 1 : 0;
    // Concept pattern conditioned on the label.
    std::size_t tries = 0;
    while (true) {
      if (++tries > kMaxRejections) {
        throw ValidationError("synth: concept base rates make the prevalence constraint unreachable");
      }
      std::size_t fraud_active = 0;
      for (std::size_t c = 0; c < planted; ++c) {
        active[c] = rng.bernoulli(cfg.concepts[c].base_rate);
        if (active[c] && cfg.concepts[c].polarity == Polarity::fraud) ++fraud_active;
      }
      if ((fraud_active >= cfg.min_fraud_concepts) == (clean == 1)) break;
    }

    RawEvent e;
    e.event_id = "e" + std::to_string(1'000'000 + i).substr(1);
    e.timestamp = cfg.start + static_cast<Timestamp>(i) * cfg.step_secs;
    e.numeric.assign(d.schema.numeric.size(), std::nullopt);
    for (std::size_t c = 0; c < planted; ++c) {
      const ConceptRule& r = d.planted[c];
      std::vector<double> xs(r.features.size());
      while (true) {
        double v = 0.0;
        for (std::size_t k = 0; k < xs.size(); ++k) {
          xs[k] = rng.normal();
          v += r.weights[k] * xs[k];
        }
        if ((v > r.threshold) == active[c]) break;
      }
      for (std::size_t k = 0; k < xs.size(); ++k) e.numeric[r.features[k]] = xs[k];
    }
    for (std::size_t k = signal_columns; k < e.numeric.size(); ++k) {
      const double v = rng.normal();
      if (!rng.bernoulli(cfg.missing_rate)) e.numeric[k] = v;
    }
    const auto channel = kChannels[rng.below(4)];
    if (!rng.bernoulli(cfg.missing_rate)) e.categorical.emplace_back(channel);
    else e.categorical.emplace_back(std::nullopt);

    for (std::size_t c = 0; c < planted; ++c) {
      if (!active[c]) continue;
      for (const auto& rule : d.concept_rules[c]) e.triggered_rules.push_back(rule);
    }
    e.fraud_label = rng.bernoulli(cfg.label_noise) ? 1 - clean : clean;

    AnnotatedEvent t;
    static_cast<RawEvent&>(t) = e;
    t.fraud_label = clean;
    t.concepts.assign(d.taxonomy.size(), 0);
    bool any = false;
    for (std::size_t c = 0; c < planted; ++c) {
      if (active[c]) {
        t.concepts[c] = 1;
        any = true;
      }
    }
    if (!any) t.concepts[d.taxonomy.fallback_for(clean)] = 1;
    d.events.push_back(std::move(e));
    d.truth.push_back(std::move(t));
  }
  return d;
}

void write_synthetic(const SynthData& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_events(dir / "events.csv", data.schema, data.events);
  save_taxonomy(data.taxonomy, dir / "taxonomy.json");
  save_mapping(data.mapping, data.taxonomy, dir / "mapping.json");
  write_annotated(dir / "truth.csv", data.schema, data.truth, data.taxonomy);
}

}  // namespace joel
